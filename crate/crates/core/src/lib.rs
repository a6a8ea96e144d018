//! Numerical lab for deep diagonal linear networks `theta = u^1 ⊙ ... ⊙ u^L`:
//! gradient flow on the layers, its conservation laws, the mirror-flow maps it
//! induces, a linear convergence bound and the experiments built on them.

pub mod conservation;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod mirror;
pub mod model;
pub mod paramcheck;
pub mod report;

pub use conservation::{
    check_assumption_a, conservation_defect, min_layer_permutation, reconstruct_theta, sigma_lower_bound, sign_census,
    MinLayerIndex, PermutedStack, SigmaBound, SignCensus,
};
pub use error::{Error, Result};
pub use experiments::{Experiment, ExperimentConfig, InitChoice, KktSolution, RateCheck, Report};
pub use flow::{integrate, integrate_redundant, Method, Parameterization, StepController, StepMode, Trajectory};
pub use mirror::{DlnEntropy, Entropy, MirrorMap, RedundantEntropy};
pub use model::{init_layers, InitScheme, LayerStack, Loss, QuadraticLoss, ThetaVector};
pub use report::{DiagnosticsReport, Section};
