//! Network weights, the Hadamard-product parameterization and the squared loss.
//!
//! A deep diagonal linear network with `L` layers in `R^d` holds weights
//! `u^1, ..., u^L` and predicts with `theta = u^1 ⊙ ... ⊙ u^L`. Layers are
//! indexed from 0 in code.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff used when solving normal equations.
pub const EIGEN_CUTOFF: f64 = 1e-12;

/// Ordered layer weights `u^1, ..., u^L`, each of length `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    layers: Vec<Vec<f64>>,
    dim: usize,
}

impl LayerStack {
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidStack(format!(
                "need at least 2 layers, got {}",
                layers.len()
            )));
        }
        let dim = layers[0].len();
        if dim == 0 {
            return Err(Error::InvalidStack("layers must be non-empty".into()));
        }
        if let Some(bad) = layers.iter().find(|l| l.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.len(),
            });
        }
        Ok(Self { layers, dim })
    }

    /// Rebuilds a stack from layer-major storage (`flat[j * d + i] = u^j_i`).
    pub(crate) fn from_layer_major(flat: &[f64], num_layers: usize, dim: usize) -> Self {
        debug_assert_eq!(flat.len(), num_layers * dim);
        let layers = flat.chunks_exact(dim).map(<[f64]>::to_vec).collect();
        Self { layers, dim }
    }

    pub(crate) fn to_layer_major(&self) -> Vec<f64> {
        self.layers.concat()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layer(&self, j: usize) -> &[f64] {
        &self.layers[j]
    }

    /// Weight of layer `j` at coordinate `i`.
    pub fn node(&self, j: usize, i: usize) -> f64 {
        self.layers[j][i]
    }

    /// All layer weights of coordinate `i`, in layer order.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.layers.iter().map(|l| l[i]).collect()
    }

    pub fn theta(&self) -> ThetaVector {
        theta_of_layers(self)
    }
}

/// The predictor `theta`, a plain vector in `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaVector(Vec<f64>);

impl ThetaVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ThetaVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ThetaVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Componentwise product of all layers.
pub fn theta_of_layers(stack: &LayerStack) -> ThetaVector {
    let mut theta = vec![1.0; stack.dim];
    for layer in &stack.layers {
        for (t, u) in theta.iter_mut().zip(layer) {
            *t *= u;
        }
    }
    ThetaVector(theta)
}

/// Writes `out[j] = prod_{k != j} factors[k]` without dividing, so zeros are exact.
pub(crate) fn leave_one_out_products(factors: &[f64], out: &mut [f64]) {
    let n = factors.len();
    debug_assert_eq!(out.len(), n);
    let mut prefix = 1.0;
    for j in 0..n {
        out[j] = prefix;
        prefix *= factors[j];
    }
    let mut suffix = 1.0;
    for j in (0..n).rev() {
        out[j] *= suffix;
        suffix *= factors[j];
    }
}

/// A differentiable empirical risk on `theta`.
pub trait Loss {
    fn dim(&self) -> usize;
    fn value(&self, theta: &[f64]) -> Result<f64>;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
    /// The infimum `L*` of the loss.
    fn optimal_value(&self) -> f64;
}

/// `L(theta) = ||X theta - y||^2`, unnormalized.
#[derive(Clone, Debug)]
pub struct QuadraticLoss {
    x: DMatrix<f64>,
    y: DVector<f64>,
    optimal_value: f64,
    min_norm_solution: DVector<f64>,
}

impl QuadraticLoss {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                found: y.len(),
            });
        }
        if x.ncols() == 0 || x.nrows() == 0 {
            return Err(Error::InvalidStack("empty design matrix".into()));
        }
        let pinv = NormalPseudoInverse::new(&x);
        let mut theta = pinv.solve(&(x.transpose() * &y));
        // one step of iterative refinement
        let r = &y - &x * &theta;
        theta += pinv.solve(&(x.transpose() * r));
        let optimal_value = (&x * &theta - &y).norm_squared();
        Ok(Self {
            x,
            y,
            optimal_value,
            min_norm_solution: theta,
        })
    }

    /// Builds the loss from row-major data.
    pub fn from_rows(rows: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        let x = DMatrix::from_fn(n, d, |r, c| rows[r][c]);
        Self::new(x, DVector::from_column_slice(y))
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn num_samples(&self) -> usize {
        self.x.nrows()
    }

    /// Minimum-Euclidean-norm least-squares solution `X^+ y`.
    pub fn min_norm_solution(&self) -> &DVector<f64> {
        &self.min_norm_solution
    }

    /// Residual `X theta - y`.
    pub fn residual(&self, theta: &[f64]) -> Result<DVector<f64>> {
        self.check_dim(theta)?;
        Ok(&self.x * DVector::from_column_slice(theta) - &self.y)
    }

    /// Returns the same loss with `X` multiplied by `c`.
    pub fn scaled_design(&self, c: f64) -> Result<Self> {
        Self::new(&self.x * c, self.y.clone())
    }

    fn check_dim(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.x.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.x.ncols(),
                found: theta.len(),
            });
        }
        Ok(())
    }
}

impl Loss for QuadraticLoss {
    fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.residual(theta)?.norm_squared())
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let r = self.residual(theta)?;
        Ok((self.x.tr_mul(&r) * 2.0).data.into())
    }

    fn optimal_value(&self) -> f64 {
        self.optimal_value
    }
}

/// Pseudo-inverse of `X^T X` from its eigendecomposition, eigenvalues below
/// `EIGEN_CUTOFF * lambda_max` dropped.
struct NormalPseudoInverse {
    vectors: DMatrix<f64>,
    inv_values: DVector<f64>,
}

impl NormalPseudoInverse {
    fn new(x: &DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(x.tr_mul(x));
        let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let cut = EIGEN_CUTOFF * lmax;
        let inv_values = eig
            .eigenvalues
            .map(|l| if lmax > 0.0 && l > cut { 1.0 / l } else { 0.0 });
        Self {
            vectors: eig.eigenvectors,
            inv_values,
        }
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let coeffs = self.vectors.tr_mul(rhs).component_mul(&self.inv_values);
        &self.vectors * coeffs
    }
}

/// Initialization schemes for the layer weights.
#[derive(Clone, Debug, PartialEq)]
pub enum InitScheme {
    /// Every node uniform in `[-scale, scale]`.
    Uniform { scale: f64 },
    /// First layer exactly zero; remaining nodes uniform in `[0.5, 1.5)`,
    /// then multiplied by `scale`. The same seed gives the same base draw for
    /// every scale.
    ZeroFirstLayer { scale: f64 },
    /// User-supplied weights, one inner vector per layer.
    Explicit(Vec<Vec<f64>>),
    /// Every node in `(0, 1]`, multiplied by `scale`.
    Positive { scale: f64 },
}

impl InitScheme {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Uniform { .. } => "uniform",
            Self::ZeroFirstLayer { .. } => "fig3",
            Self::Explicit(_) => "file",
            Self::Positive { .. } => "positive",
        }
    }
}

/// Deterministic RNG for a seed. Distinct `stream`s give independent draws.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) const INIT_STREAM: u64 = 1;

pub fn init_layers(dim: usize, num_layers: usize, scheme: &InitScheme, seed: u64) -> Result<LayerStack> {
    if dim == 0 {
        return Err(Error::InvalidInit("dimension must be at least 1".into()));
    }
    if num_layers < 2 {
        return Err(Error::InvalidInit(format!("need at least 2 layers, got {num_layers}")));
    }
    let check_scale = |scale: f64| {
        if scale.is_finite() && scale > 0.0 {
            Ok(scale)
        } else {
            Err(Error::InvalidInit(format!(
                "scale must be positive and finite, got {scale}"
            )))
        }
    };
    let mut rng = seeded_rng(seed, INIT_STREAM);
    let layers = match scheme {
        InitScheme::Uniform { scale } => {
            let scale = check_scale(*scale)?;
            (0..num_layers)
                .map(|_| (0..dim).map(|_| scale * rng.random_range(-1.0..=1.0)).collect())
                .collect()
        }
        InitScheme::ZeroFirstLayer { scale } => {
            let scale = check_scale(*scale)?;
            let mut layers = vec![vec![0.0; dim]];
            for _ in 1..num_layers {
                layers.push((0..dim).map(|_| rng.random_range(0.5..1.5) * scale).collect());
            }
            layers
        }
        InitScheme::Positive { scale } => {
            let scale = check_scale(*scale)?;
            (0..num_layers)
                .map(|_| (0..dim).map(|_| scale * (1.0 - rng.random::<f64>())).collect())
                .collect()
        }
        InitScheme::Explicit(values) => {
            if values.len() != num_layers || values.iter().any(|l| l.len() != dim) {
                return Err(Error::InvalidInit(format!(
                    "explicit values must be {num_layers} layers of length {dim}"
                )));
            }
            if values.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInit("explicit values must be finite".into()));
            }
            values.clone()
        }
    };
    LayerStack::new(layers)
}
