use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::flow::Trajectory;
use crate::model::{QuadraticLoss, EIGEN_CUTOFF};

/// Slack on the rate bound, relative to the initial gap.
pub const RATE_SLACK_REL: f64 = 1e-9;
/// Absolute slack on the rate bound, scaled by `max(1, L*)`.
pub const RATE_SLACK_ABS: f64 = 1e-13;

/// PL constant of `||X theta - y||^2`: `2 mu (L - L*) <= ||grad L||^2` holds with
/// `mu = 2 lambda`, `lambda` the smallest nonzero eigenvalue of `X X^T`.
pub fn pl_constant(loss: &QuadraticLoss) -> Result<f64> {
    let x = loss.x();
    let gram = if x.nrows() <= x.ncols() {
        x * x.transpose()
    } else {
        x.tr_mul(x)
    };
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let lmax = eig.iter().cloned().fold(0.0, f64::max);
    if lmax <= 0.0 {
        return Err(Error::ZeroDesign);
    }
    let lmin = eig
        .iter()
        .cloned()
        .filter(|&l| l > EIGEN_CUTOFF * lmax)
        .fold(f64::INFINITY, f64::min);
    Ok(2.0 * lmin)
}

/// Pointwise check of `L(theta(t)) - L* <= exp(-2 sigma mu t) (L(theta(0)) - L*)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RateCheck {
    pub sigma: f64,
    pub mu: f64,
    pub violations: usize,
    /// Largest `gap(t) / bound(t)` seen (at most 1 on a passing run).
    pub worst_ratio: f64,
}

impl RateCheck {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

pub fn check_rate(traj: &Trajectory, sigma: f64, mu: f64) -> RateCheck {
    let gaps = traj.gaps();
    let gap0 = gaps[0];
    let slack = RATE_SLACK_REL * gap0.abs() + RATE_SLACK_ABS * traj.optimal_loss.max(1.0);
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    for (t, gap) in traj.times.iter().zip(&gaps) {
        let bound = (-2.0 * sigma * mu * t).exp() * gap0;
        if *gap > bound + slack {
            violations += 1;
        }
        if bound > 0.0 {
            worst_ratio = worst_ratio.max(gap / bound);
        }
    }
    RateCheck {
        sigma,
        mu,
        violations,
        worst_ratio,
    }
}

/// First time the gap reaches `target`, interpolating `log gap` linearly
/// between the bracketing snapshots.
pub fn time_to_gap(traj: &Trajectory, target: f64) -> Option<f64> {
    let gaps = traj.gaps();
    let k = gaps.iter().position(|&g| g <= target)?;
    if k == 0 {
        return Some(0.0);
    }
    let (g0, g1) = (gaps[k - 1], gaps[k]);
    let (t0, t1) = (traj.times[k - 1], traj.times[k]);
    if g1 <= 0.0 {
        return Some(t1);
    }
    let frac = (g0.ln() - target.ln()) / (g0.ln() - g1.ln());
    Some(t0 + frac * (t1 - t0))
}
