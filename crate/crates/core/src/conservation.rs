//! Conserved quantities of the layer flow and the bounds built on them.
//!
//! Along the flow, `u^j(t)^2 - u^j(0)^2` is the same vector for every layer
//! `j`. Consequently only the layer holding the smallest `|u^k_i(0)|` of a
//! coordinate can ever reach zero, `theta` is a function of that layer alone,
//! and `M(t) = diag(sum_j prod_{k != j} u^k_i(t)^2)` stays bounded below by an
//! initialization-dependent constant.
//!
//! The derivative form of the conservation law reads
//! `d/dt (u^j ⊙ u^j) = -2 theta ⊙ grad L(theta)` (the factor 2 comes from the
//! chain rule); only the integrated equality is checked here.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::flow::Trajectory;
use crate::model::{leave_one_out_products, LayerStack, ThetaVector};

/// Default relative gap under which a unique minimum is flagged as a near-tie.
pub const NEAR_TIE_REL: f64 = 1e-9;

/// Per-coordinate index of the layer with the smallest initial magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct MinLayerIndex {
    /// `k[i]`: layer (0-based) achieving `min_k |u^k_i(0)|`; first one on ties.
    pub k: Vec<usize>,
    pub unique: Vec<bool>,
    /// Unique, but the runner-up is within the near-tie threshold.
    pub near_tie: Vec<bool>,
}

impl MinLayerIndex {
    /// Assumption (A): every coordinate has a unique minimal node.
    pub fn holds(&self) -> bool {
        self.unique.iter().all(|&u| u)
    }

    pub fn first_violation(&self) -> Option<usize> {
        self.unique.iter().position(|&u| !u)
    }

    pub fn has_near_ties(&self) -> bool {
        self.near_tie.iter().any(|&n| n)
    }

    pub(crate) fn require(&self) -> Result<()> {
        match self.first_violation() {
            Some(coordinate) => Err(Error::AssumptionViolated { coordinate }),
            None => Ok(()),
        }
    }
}

pub fn check_assumption_a(stack0: &LayerStack) -> MinLayerIndex {
    check_assumption_a_with(stack0, NEAR_TIE_REL)
}

/// Exact tie detection on `|u^k_i(0)|`, plus a near-tie flag when the two
/// smallest magnitudes differ by at most `near_tie_rel` relative to the larger.
pub fn check_assumption_a_with(stack0: &LayerStack, near_tie_rel: f64) -> MinLayerIndex {
    let d = stack0.dim();
    let mut idx = MinLayerIndex {
        k: Vec::with_capacity(d),
        unique: Vec::with_capacity(d),
        near_tie: Vec::with_capacity(d),
    };
    for i in 0..d {
        let mags: Vec<f64> = stack0.column(i).iter().map(|v| v.abs()).collect();
        let (mut best, mut best_j) = (f64::INFINITY, 0);
        for (j, &m) in mags.iter().enumerate() {
            if m < best {
                best = m;
                best_j = j;
            }
        }
        let ties = mags.iter().filter(|&&m| m == best).count();
        let runner_up = mags
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != best_j)
            .map(|(_, &m)| m)
            .fold(f64::INFINITY, f64::min);
        let unique = ties == 1;
        idx.k.push(best_j);
        idx.unique.push(unique);
        idx.near_tie
            .push(unique && runner_up - best <= near_tie_rel * runner_up);
    }
    idx
}

/// Entry `(j, k)`: max over snapshots and coordinates of
/// `|(u^j_i(t)^2 - u^j_i(0)^2) - (u^k_i(t)^2 - u^k_i(0)^2)|`.
pub fn conservation_defect(traj: &Trajectory) -> DMatrix<f64> {
    let nl = traj.num_layers();
    let d = traj.dim();
    let init = traj.initial_stack();
    let mut out = DMatrix::zeros(nl, nl);
    let mut shift = vec![0.0; nl];
    for state in &traj.states {
        for i in 0..d {
            for (j, s) in shift.iter_mut().enumerate() {
                *s = state.node(j, i).powi(2) - init.node(j, i).powi(2);
            }
            for j in 0..nl {
                for k in 0..nl {
                    let e = (shift[j] - shift[k]).abs();
                    if e > out[(j, k)] {
                        out[(j, k)] = e;
                    }
                }
            }
        }
    }
    out
}

/// Which layers changed sign (or hit zero) at each coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct SignCensus {
    /// Sorted crossing layers per coordinate.
    pub crossings: Vec<Vec<usize>>,
    pub min_layer: Vec<usize>,
    /// `(coordinate, layer)` pairs where a non-minimal layer crossed.
    pub violations: Vec<(usize, usize)>,
}

impl SignCensus {
    /// True when every crossing happened in the coordinate's minimal layer.
    pub fn verified(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn total_crossings(&self) -> usize {
        self.crossings.iter().map(Vec::len).sum()
    }
}

/// Grid-resolution census: a crossing between snapshots `k` and `k+1` is
/// `sign(u(t_k)) * sign(u(t_{k+1})) < 0`, and reaching exactly 0 at `t > 0`
/// also counts. Double crossings between two snapshots go unseen.
pub fn sign_census(traj: &Trajectory, idx: &MinLayerIndex) -> SignCensus {
    let (nl, d) = (traj.num_layers(), traj.dim());
    let mut crossings = vec![Vec::new(); d];
    for (i, cross) in crossings.iter_mut().enumerate() {
        for j in 0..nl {
            let crossed = traj.states.windows(2).any(|w| {
                let (a, b) = (w[0].node(j, i), w[1].node(j, i));
                a * b < 0.0 || b == 0.0
            });
            if crossed {
                cross.push(j);
            }
        }
    }
    let violations = crossings
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.iter().filter(move |&&j| j != idx.k[i]).map(move |&j| (i, j)))
        .collect();
    SignCensus {
        crossings,
        min_layer: idx.k.clone(),
        violations,
    }
}

/// Layers reordered so that the first one holds every coordinate's minimal node.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutedStack {
    v_layers: LayerStack,
    /// `v^j(0)^2 - v^1(0)^2` for `j = 2..L` (index 0 is layer 2).
    pub deltas: Vec<Vec<f64>>,
    /// `sign(v^j(0))` for `j = 2..L`.
    pub signs: Vec<Vec<f64>>,
    min_layer: Vec<usize>,
}

impl PermutedStack {
    pub fn v_layers(&self) -> &LayerStack {
        &self.v_layers
    }

    /// Applies the same per-coordinate swap to a later snapshot.
    pub fn permute(&self, stack: &LayerStack) -> LayerStack {
        let mut layers = stack.layers().to_vec();
        for (i, &k) in self.min_layer.iter().enumerate() {
            if k != 0 {
                let tmp = layers[0][i];
                layers[0][i] = layers[k][i];
                layers[k][i] = tmp;
            }
        }
        LayerStack::new(layers).expect("permutation keeps shape")
    }

    /// `v^1` of a later snapshot.
    pub fn first_layer(&self, stack: &LayerStack) -> Vec<f64> {
        self.min_layer
            .iter()
            .enumerate()
            .map(|(i, &k)| stack.node(k, i))
            .collect()
    }
}

/// Swaps each coordinate's minimal node into layer 1 and the displaced node
/// into the vacated slot.
pub fn min_layer_permutation(stack0: &LayerStack, idx: &MinLayerIndex) -> Result<PermutedStack> {
    idx.require()?;
    if idx.k.len() != stack0.dim() {
        return Err(Error::DimensionMismatch {
            expected: stack0.dim(),
            found: idx.k.len(),
        });
    }
    let mut perm = PermutedStack {
        v_layers: stack0.clone(),
        deltas: Vec::new(),
        signs: Vec::new(),
        min_layer: idx.k.clone(),
    };
    perm.v_layers = perm.permute(stack0);
    let v = &perm.v_layers;
    let v1 = v.layer(0);
    for j in 1..v.num_layers() {
        perm.deltas
            .push(v.layer(j).iter().zip(v1).map(|(a, b)| a * a - b * b).collect());
        perm.signs.push(v.layer(j).iter().map(|a| a.signum()).collect());
    }
    Ok(perm)
}

/// Rebuilds `theta` from the minimal layer alone:
/// `theta = v^1 ⊙ prod_{j>=2} sign(v^j(0)) ⊙ sqrt(v^1^2 + Delta_j)`.
///
/// The factor for `j = 1` is carried by `v^1` itself rather than
/// `sign(v^1(0)) |v^1|`, so the formula stays valid when the minimal layer
/// starts at zero or crosses it.
pub fn reconstruct_theta(v1_t: &[f64], perm: &PermutedStack) -> Result<ThetaVector> {
    let d = perm.v_layers.dim();
    if v1_t.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: v1_t.len(),
        });
    }
    let mut theta = v1_t.to_vec();
    for (delta, sign) in perm.deltas.iter().zip(&perm.signs) {
        for i in 0..d {
            let radicand = v1_t[i] * v1_t[i] + delta[i];
            if radicand < 0.0 {
                return Err(Error::NegativeRadicand {
                    coordinate: i,
                    value: radicand,
                });
            }
            theta[i] *= sign[i] * radicand.sqrt();
        }
    }
    Ok(ThetaVector::new(theta))
}

/// `max_t ||reconstruct_theta(v^1(t)) - theta(t)||_inf` along a trajectory.
pub fn reconstruction_error(traj: &Trajectory) -> Result<f64> {
    let idx = check_assumption_a(traj.initial_stack());
    let perm = min_layer_permutation(traj.initial_stack(), &idx)?;
    let mut worst: f64 = 0.0;
    for (state, theta) in traj.states.iter().zip(&traj.thetas) {
        let rebuilt = reconstruct_theta(&perm.first_layer(state), &perm)?;
        for (a, b) in rebuilt.iter().zip(theta.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Diagonal of `M = diag(sum_j prod_{k != j} u^k_i^2)`.
pub fn m_matrix(stack: &LayerStack) -> Vec<f64> {
    let nl = stack.num_layers();
    let mut loo = vec![0.0; nl];
    (0..stack.dim())
        .map(|i| {
            let squares: Vec<f64> = stack.column(i).iter().map(|u| u * u).collect();
            leave_one_out_products(&squares, &mut loo);
            loo.iter().sum()
        })
        .collect()
}

/// Diagonal of `M^{-1}`.
pub fn m_inverse(diagonal: &[f64]) -> Result<Vec<f64>> {
    diagonal
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            if m == 0.0 {
                Err(Error::SingularM { coordinate: i })
            } else {
                Ok(1.0 / m)
            }
        })
        .collect()
}

/// Time-independent lower bound on `lambda_min(M(t))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaBound {
    pub sigma: f64,
    /// `prod_{k != k_i} (u^k_i(0)^2 - u^{k_i}_i(0)^2)` for each coordinate.
    pub per_coordinate: Vec<f64>,
}

pub fn sigma_lower_bound(stack0: &LayerStack, idx: &MinLayerIndex) -> Result<SigmaBound> {
    idx.require()?;
    let per_coordinate: Vec<f64> = (0..stack0.dim())
        .map(|i| {
            let ki = idx.k[i];
            let base = stack0.node(ki, i).powi(2);
            (0..stack0.num_layers())
                .filter(|&k| k != ki)
                .map(|k| stack0.node(k, i).powi(2) - base)
                .product()
        })
        .collect();
    let sigma = per_coordinate.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(SigmaBound { sigma, per_coordinate })
}

/// Number of `(snapshot, coordinate)` pairs where `M_ii(t)` falls below the
/// coordinate's sigma product by more than `rel_tol`.
pub fn m_bound_violations(traj: &Trajectory, bound: &SigmaBound, rel_tol: f64) -> usize {
    traj.states
        .iter()
        .map(|s| {
            m_matrix(s)
                .iter()
                .zip(&bound.per_coordinate)
                .filter(|(m, b)| **m < **b * (1.0 - rel_tol))
                .count()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{integrate, StepController};
    use crate::model::{theta_of_layers, QuadraticLoss};

    fn stack(layers: &[&[f64]]) -> LayerStack {
        LayerStack::new(layers.iter().map(|l| l.to_vec()).collect()).unwrap()
    }

    #[test]
    fn tie_detection() {
        let idx = check_assumption_a(&stack(&[&[1.0, 1.0], &[1.0, 2.0]]));
        assert!(!idx.holds());
        assert_eq!(idx.first_violation(), Some(0));
        let idx = check_assumption_a(&stack(&[&[-1.0, 2.0], &[2.0, 1.0]]));
        assert!(idx.holds());
        assert_eq!(idx.k, vec![0, 1]);
        // magnitudes tie across signs
        assert!(!check_assumption_a(&stack(&[&[-0.5], &[0.5], &[3.0]])).holds());
    }

    #[test]
    fn near_tie_flag() {
        let idx = check_assumption_a(&stack(&[&[1.0], &[1.0 + 1e-12], &[3.0]]));
        assert!(idx.holds() && idx.has_near_ties());
        let idx = check_assumption_a(&stack(&[&[1.0], &[1.1]]));
        assert!(!idx.has_near_ties());
    }

    #[test]
    fn permutation_examples() {
        let s = stack(&[&[5.0], &[2.0]]);
        let idx = check_assumption_a(&s);
        let p = min_layer_permutation(&s, &idx).unwrap();
        assert_eq!(p.v_layers().layers(), &[vec![2.0], vec![5.0]]);
        assert_eq!(p.deltas, vec![vec![21.0]]);

        let s = stack(&[&[0.1, -0.2], &[1.0, 2.0], &[-3.0, 0.5]]);
        let p = min_layer_permutation(&s, &check_assumption_a(&s)).unwrap();
        assert_eq!(p.v_layers(), &s);
    }

    #[test]
    fn permutation_requires_assumption() {
        let s = stack(&[&[1.0], &[1.0]]);
        assert!(matches!(
            min_layer_permutation(&s, &check_assumption_a(&s)),
            Err(Error::AssumptionViolated { coordinate: 0 })
        ));
        assert!(sigma_lower_bound(&s, &check_assumption_a(&s)).is_err());
    }

    #[test]
    fn reconstruction_at_initialization() {
        let s = stack(&[&[0.3, -2.0, 0.0], &[-1.2, 0.4, 1.5], &[2.0, 1.0, -0.7]]);
        let p = min_layer_permutation(&s, &check_assumption_a(&s)).unwrap();
        let rebuilt = reconstruct_theta(p.v_layers().layer(0), &p).unwrap();
        let theta = theta_of_layers(&s);
        for (a, b) in rebuilt.iter().zip(theta.iter()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn reconstruction_two_layer_form() {
        // L = 2: theta = v1 * sign(v2(0)) * sqrt(v1^2 + Delta)
        let s = stack(&[&[-3.0], &[0.5]]);
        let p = min_layer_permutation(&s, &check_assumption_a(&s)).unwrap();
        let v1 = 0.8;
        let got = reconstruct_theta(&[v1], &p).unwrap()[0];
        assert!((got - -v1 * (v1 * v1 + 8.75f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn negative_radicand_is_reported() {
        let s = stack(&[&[0.0], &[1.0]]);
        let mut p = min_layer_permutation(&s, &check_assumption_a(&s)).unwrap();
        p.deltas[0][0] = -4.0;
        assert!(matches!(
            reconstruct_theta(&[1.0], &p),
            Err(Error::NegativeRadicand { coordinate: 0, .. })
        ));
        assert!(reconstruct_theta(&[1.0, 2.0], &p).is_err());
    }

    #[test]
    fn m_matrix_examples() {
        assert_eq!(m_matrix(&stack(&[&[1.0, 2.0], &[3.0, 4.0]])), vec![10.0, 20.0]);
        assert_eq!(m_matrix(&stack(&[&[1.0], &[2.0], &[3.0]])), vec![49.0]);
        assert_eq!(m_inverse(&[4.0, 0.5]).unwrap(), vec![0.25, 2.0]);
        assert!(matches!(
            m_inverse(&[1.0, 0.0]),
            Err(Error::SingularM { coordinate: 1 })
        ));
        // two zero nodes in one coordinate make M singular
        assert_eq!(m_matrix(&stack(&[&[0.0], &[0.0], &[3.0]])), vec![0.0]);
    }

    #[test]
    fn sigma_examples() {
        let s = stack(&[&[1.0], &[2.0], &[3.0]]);
        assert_eq!(sigma_lower_bound(&s, &check_assumption_a(&s)).unwrap().sigma, 24.0);
        let s = stack(&[&[1.0, 3.0], &[2.0, 2.0]]);
        let b = sigma_lower_bound(&s, &check_assumption_a(&s)).unwrap();
        assert_eq!(b.per_coordinate, vec![3.0, 5.0]);
        assert_eq!(b.sigma, 3.0);
    }

    #[test]
    fn defect_is_zero_at_initialization() {
        let s = stack(&[&[0.3, -1.0], &[1.2, 0.4], &[-0.8, 2.0]]);
        let loss = QuadraticLoss::from_rows(&[vec![1.0, 2.0]], &[0.5]).unwrap();
        let ctrl = StepController::fixed(0.1, 0.1);
        let mut traj = integrate(&s, &loss, &ctrl).unwrap();
        traj.states.truncate(1);
        assert!(conservation_defect(&traj).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equilibrium_has_no_defect_and_no_crossings() {
        let s = stack(&[&[2.0], &[3.0]]);
        let loss = QuadraticLoss::from_rows(&[vec![1.0]], &[6.0]).unwrap();
        let traj = integrate(&s, &loss, &StepController::fixed(1e-2, 1.0)).unwrap();
        assert!(conservation_defect(&traj).iter().all(|&v| v == 0.0));
        let census = sign_census(&traj, &check_assumption_a(&s));
        assert!(census.verified());
        assert_eq!(census.total_crossings(), 0);
    }

    #[test]
    fn census_flags_non_minimal_crossings() {
        // hand-built trajectory: layer 1 (non-minimal) flips sign
        let s0 = stack(&[&[0.1], &[1.0]]);
        let s1 = stack(&[&[-0.1], &[-1.0]]);
        let loss = QuadraticLoss::from_rows(&[vec![1.0]], &[0.1]).unwrap();
        let mut traj = integrate(&s0, &loss, &StepController::fixed(0.5, 0.5)).unwrap();
        traj.states[1] = s1;
        let census = sign_census(&traj, &check_assumption_a(&s0));
        assert_eq!(census.crossings[0], vec![0, 1]);
        assert_eq!(census.violations, vec![(0, 1)]);
        assert!(!census.verified());
    }
}
