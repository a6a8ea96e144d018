//! Closed-form mirror maps and mirror-flow residuals.
//!
//! For the 2-layer network `theta = u ⊙ v`, the flow satisfies
//! `theta(t) = Psi(xi(t))` with `Psi(xi) = (Delta0 / 2) sinh(2 xi + c)`,
//! `Delta0 = |u(0)^2 - v(0)^2|` and `c = log|(u(0) + v(0)) / (u(0) - v(0))|`.
//! The entropy
//!
//! ```text
//! Q(theta) = 1/4 sum_i (2 theta_i asinh(2 theta_i / Delta0_i) - sqrt(4 theta_i^2 + Delta0_i^2) + Delta0_i)
//!            - 1/2 <c, theta>
//! ```
//!
//! has `grad Q = Psi^{-1}`. The prefactor 1/4 is what makes that identity hold.
//!
//! For the redundant network `theta = u^{⊙L}` (L >= 3, positive weights),
//! `theta(t) = (u(0)^{-(L-2)} - L(L-2) xi(t))^{-L/(L-2)}` and
//! `Q(theta) = <u(0)^{-(L-2)}, theta> - (L/2) <1, theta^{2/L}>`, whose gradient
//! is `u(0)^{-(L-2)} - theta^{-(1-2/L)} = L(L-2) xi`.

use crate::conservation::{m_inverse, m_matrix};
use crate::error::{Error, Result};
use crate::flow::{Parameterization, Trajectory};
use crate::model::{LayerStack, ThetaVector};

/// A convex entropy `Q` together with the inverse of its gradient.
pub trait Entropy {
    fn dim(&self) -> usize;
    fn value(&self, theta: &[f64]) -> Result<f64>;
    /// `grad Q(theta)`, the mirror (dual) coordinates.
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
    /// `(grad Q)^{-1}(eta)`.
    fn gradient_inverse(&self, eta: &[f64]) -> Result<Vec<f64>>;
    /// Diagonal Jacobian of `gradient_inverse`.
    fn gradient_inverse_derivative(&self, eta: &[f64]) -> Result<Vec<f64>>;
    /// `c` such that `grad Q(theta(t)) = c * xi(t)` along the matching flow.
    fn dual_scale(&self) -> f64;
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Mirror map of the 2-layer diagonal network.
#[derive(Clone, Debug, PartialEq)]
pub struct DlnEntropy {
    pub delta0: Vec<f64>,
    pub c: Vec<f64>,
    u0: Vec<f64>,
    v0: Vec<f64>,
}

impl DlnEntropy {
    /// Rejects coordinates with `Delta0_i < 1e-12 * max(u_i^2, v_i^2)` (or zero).
    pub fn new(u0: &[f64], v0: &[f64]) -> Result<Self> {
        check_len(u0.len(), v0.len())?;
        if u0.is_empty() {
            return Err(Error::InvalidEntropy("empty initialization".into()));
        }
        let mut delta0 = Vec::with_capacity(u0.len());
        let mut c = Vec::with_capacity(u0.len());
        for (i, (&u, &v)) in u0.iter().zip(v0).enumerate() {
            let delta = (u * u - v * v).abs();
            if !(delta > 0.0 && delta >= 1e-12 * (u * u).max(v * v)) {
                return Err(Error::InvalidEntropy(format!(
                    "|u_{i}(0)| and |v_{i}(0)| coincide (Delta0 = {delta:e})"
                )));
            }
            delta0.push(delta);
            c.push(((u + v) / (u - v)).abs().ln());
        }
        Ok(Self {
            delta0,
            c,
            u0: u0.to_vec(),
            v0: v0.to_vec(),
        })
    }

    pub fn from_stack(stack0: &LayerStack) -> Result<Self> {
        if stack0.num_layers() != 2 {
            return Err(Error::MismatchedModel(format!(
                "the closed-form map needs 2 layers, got {}",
                stack0.num_layers()
            )));
        }
        Self::new(stack0.layer(0), stack0.layer(1))
    }

    pub fn dim(&self) -> usize {
        self.delta0.len()
    }

    /// `Psi(xi) = (Delta0 / 2) sinh(2 xi + c)`.
    pub fn psi(&self, xi: &[f64]) -> Result<ThetaVector> {
        check_len(self.dim(), xi.len())?;
        Ok(xi
            .iter()
            .zip(&self.delta0)
            .zip(&self.c)
            .map(|((x, d), c)| 0.5 * d * (2.0 * x + c).sinh())
            .collect::<Vec<_>>()
            .into())
    }

    /// `Psi^{-1}(theta) = (asinh(2 theta / Delta0) - c) / 2`.
    pub fn psi_inverse(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), theta.len())?;
        Ok(theta
            .iter()
            .zip(&self.delta0)
            .zip(&self.c)
            .map(|((t, d), c)| 0.5 * ((2.0 * t / d).asinh() - c))
            .collect())
    }

    pub fn entropy(&self, theta: &[f64]) -> Result<f64> {
        check_len(self.dim(), theta.len())?;
        let mut q = 0.0;
        for ((&t, &d), &c) in theta.iter().zip(&self.delta0).zip(&self.c) {
            q += 0.25 * (2.0 * t * (2.0 * t / d).asinh() - (4.0 * t * t + d * d).sqrt() + d);
            q -= 0.5 * c * t;
        }
        Ok(q)
    }

    /// `theta` from the `z± = u ± v` factorization:
    /// `(z+(0)^2 e^{2 xi} - z-(0)^2 e^{-2 xi}) / 4`.
    pub fn z_factorization(&self, xi: &[f64]) -> Result<ThetaVector> {
        check_len(self.dim(), xi.len())?;
        Ok(xi
            .iter()
            .zip(self.u0.iter().zip(&self.v0))
            .map(|(x, (u, v))| ((u + v).powi(2) * (2.0 * x).exp() - (u - v).powi(2) * (-2.0 * x).exp()) / 4.0)
            .collect::<Vec<_>>()
            .into())
    }
}

impl Entropy for DlnEntropy {
    fn dim(&self) -> usize {
        self.delta0.len()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        self.entropy(theta)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.psi_inverse(theta)
    }

    fn gradient_inverse(&self, eta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.psi(eta)?.into_inner())
    }

    fn gradient_inverse_derivative(&self, eta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), eta.len())?;
        Ok(eta
            .iter()
            .zip(&self.delta0)
            .zip(&self.c)
            .map(|((x, d), c)| d * (2.0 * x + c).cosh())
            .collect())
    }

    fn dual_scale(&self) -> f64 {
        1.0
    }
}

/// Mirror map of the redundant network `theta = u^{⊙L}`, `L >= 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct RedundantEntropy {
    u0: Vec<f64>,
    num_layers: usize,
    /// `u(0)^{-(L-2)}`
    offset: Vec<f64>,
}

impl RedundantEntropy {
    pub fn new(u0: &[f64], num_layers: usize) -> Result<Self> {
        if num_layers < 3 {
            return Err(Error::InvalidEntropy(format!(
                "redundant map needs L >= 3, got {num_layers}"
            )));
        }
        if u0.is_empty() || u0.iter().any(|&u| !(u > 0.0 && u.is_finite())) {
            return Err(Error::InvalidEntropy(
                "initial weights must be strictly positive".into(),
            ));
        }
        let p = -(num_layers as f64 - 2.0);
        Ok(Self {
            u0: u0.to_vec(),
            num_layers,
            offset: u0.iter().map(|u| u.powf(p)).collect(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn u0(&self) -> &[f64] {
        &self.u0
    }

    /// `L (L - 2)`
    fn scale(&self) -> f64 {
        let l = self.num_layers as f64;
        l * (l - 2.0)
    }

    fn check_positive(theta: &[f64]) -> Result<()> {
        match theta.iter().position(|&t| t <= 0.0 || t.is_nan()) {
            Some(i) => Err(Error::Domain {
                coordinate: i,
                value: theta[i],
            }),
            None => Ok(()),
        }
    }

    /// `theta = (u(0)^{-(L-2)} - L(L-2) xi)^{-L/(L-2)}`, with `xi` the raw
    /// accumulated negative gradient.
    pub fn psi(&self, xi: &[f64]) -> Result<ThetaVector> {
        check_len(self.u0.len(), xi.len())?;
        let eta: Vec<f64> = xi.iter().map(|x| self.scale() * x).collect();
        Ok(self.gradient_inverse(&eta)?.into())
    }

    /// `xi = (u(0)^{-(L-2)} - theta^{-(L-2)/L}) / (L(L-2))`.
    pub fn psi_inverse(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.gradient(theta)?.into_iter().map(|g| g / self.scale()).collect())
    }

    pub fn entropy(&self, theta: &[f64]) -> Result<f64> {
        check_len(self.u0.len(), theta.len())?;
        Self::check_positive(theta)?;
        let l = self.num_layers as f64;
        let linear: f64 = self.offset.iter().zip(theta).map(|(a, t)| a * t).sum();
        let power: f64 = theta.iter().map(|t| t.powf(2.0 / l)).sum();
        Ok(linear - 0.5 * l * power)
    }
}

impl Entropy for RedundantEntropy {
    fn dim(&self) -> usize {
        self.u0.len()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        self.entropy(theta)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.u0.len(), theta.len())?;
        Self::check_positive(theta)?;
        let p = -(1.0 - 2.0 / self.num_layers as f64);
        Ok(self.offset.iter().zip(theta).map(|(a, t)| a - t.powf(p)).collect())
    }

    fn gradient_inverse(&self, eta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.u0.len(), eta.len())?;
        let l = self.num_layers as f64;
        eta.iter()
            .zip(&self.offset)
            .enumerate()
            .map(|(i, (e, a))| {
                let base = a - e;
                if base > 0.0 {
                    Ok(base.powf(-l / (l - 2.0)))
                } else {
                    Err(Error::Domain {
                        coordinate: i,
                        value: base,
                    })
                }
            })
            .collect()
    }

    fn gradient_inverse_derivative(&self, eta: &[f64]) -> Result<Vec<f64>> {
        let l = self.num_layers as f64;
        let theta = self.gradient_inverse(eta)?;
        Ok(theta
            .iter()
            .zip(eta.iter().zip(&self.offset))
            .map(|(t, (e, a))| l / (l - 2.0) * t / (a - e))
            .collect())
    }

    fn dual_scale(&self) -> f64 {
        self.scale()
    }
}

/// One of the two closed-form maps.
#[derive(Clone, Debug, PartialEq)]
pub enum MirrorMap {
    Dln(DlnEntropy),
    Redundant(RedundantEntropy),
}

impl MirrorMap {
    fn inner(&self) -> &dyn Entropy {
        match self {
            MirrorMap::Dln(e) => e,
            MirrorMap::Redundant(e) => e,
        }
    }
}

impl Entropy for MirrorMap {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        self.inner().value(theta)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.inner().gradient(theta)
    }

    fn gradient_inverse(&self, eta: &[f64]) -> Result<Vec<f64>> {
        self.inner().gradient_inverse(eta)
    }

    fn gradient_inverse_derivative(&self, eta: &[f64]) -> Result<Vec<f64>> {
        self.inner().gradient_inverse_derivative(eta)
    }

    fn dual_scale(&self) -> f64 {
        self.inner().dual_scale()
    }
}

/// `max_t ||grad Q(theta(t)) / c - xi(t)||_inf`, in units of `xi`.
pub fn mirror_residual_closed_form(traj: &Trajectory, map: &MirrorMap) -> Result<f64> {
    match map {
        MirrorMap::Dln(_) => {
            if traj.kind != Parameterization::Diagonal || traj.num_layers() != 2 {
                return Err(Error::MismatchedModel(
                    "2-layer map needs a 2-layer diagonal trajectory".into(),
                ));
            }
        }
        MirrorMap::Redundant(e) => {
            if traj.kind != Parameterization::Redundant || traj.num_layers() != e.num_layers() {
                return Err(Error::MismatchedModel(format!(
                    "redundant map needs a redundant trajectory with {} layers",
                    e.num_layers()
                )));
            }
        }
    }
    check_len(map.dim(), traj.dim())?;
    let scale = map.dual_scale();
    let mut worst: f64 = 0.0;
    for (theta, xi) in traj.thetas.iter().zip(&traj.xi) {
        let dual = map.gradient(theta)?;
        for (g, x) in dual.iter().zip(xi) {
            worst = worst.max((g / scale - x).abs());
        }
    }
    Ok(worst)
}

/// `max ||M^{-1}(t) theta'(t) + grad L(theta(t))||_inf` over interior
/// snapshots, with `theta'` from three-point differences (second order on any grid).
pub fn mirror_residual_general(traj: &Trajectory) -> Result<f64> {
    if traj.kind != Parameterization::Diagonal {
        return Err(Error::MismatchedModel(
            "general residual applies to diagonal networks".into(),
        ));
    }
    let mut worst: f64 = 0.0;
    for k in 1..traj.len().saturating_sub(1) {
        let (h1, h2) = (traj.times[k] - traj.times[k - 1], traj.times[k + 1] - traj.times[k]);
        let (a, b, c) = (-h2 / (h1 * (h1 + h2)), (h2 - h1) / (h1 * h2), h1 / (h2 * (h1 + h2)));
        let m_inv = m_inverse(&m_matrix(&traj.states[k]))?;
        let (prev, cur, next) = (&traj.thetas[k - 1], &traj.thetas[k], &traj.thetas[k + 1]);
        for i in 0..traj.dim() {
            let rate = a * prev[i] + b * cur[i] + c * next[i];
            worst = worst.max((m_inv[i] * rate + traj.gradients[k][i]).abs());
        }
    }
    Ok(worst)
}
