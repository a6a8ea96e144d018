use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid layer stack: {0}")]
    InvalidStack(String),

    #[error("invalid initialization: {0}")]
    InvalidInit(String),

    #[error("invalid step controller: {0}")]
    InvalidController(String),

    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepSizeUnderflow { t: f64, h: f64 },

    #[error("non-finite or exploding state at t = {t}; retry with a smaller step")]
    Divergence { t: f64 },

    #[error("assumption (A) violated: minimal node of coordinate {coordinate} is not unique")]
    AssumptionViolated { coordinate: usize },

    #[error("negative radicand {value:e} at coordinate {coordinate}")]
    NegativeRadicand { coordinate: usize, value: f64 },

    #[error("M is singular at coordinate {coordinate}")]
    SingularM { coordinate: usize },

    #[error("invalid entropy map: {0}")]
    InvalidEntropy(String),

    #[error("value {value} at coordinate {coordinate} is outside the map's domain")]
    Domain { coordinate: usize, value: f64 },

    #[error("mismatched model: {0}")]
    MismatchedModel(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("design matrix is identically zero")]
    ZeroDesign,

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonNonConvergence { iterations: usize, residual: f64 },

    #[error("rank-deficient Jacobian in Newton solve")]
    RankDeficientJacobian,

    #[error("flow did not reach the target gap by t = {t} (gap {gap:e})")]
    FlowNotConverged { t: f64, gap: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
