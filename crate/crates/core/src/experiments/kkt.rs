use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mirror::Entropy;
use crate::model::QuadraticLoss;

pub const NEWTON_MAX_ITERATIONS: usize = 50;
const ARMIJO: f64 = 1e-4;
const MIN_DAMPING: f64 = 1.0 / (1u64 << 50) as f64;

/// Solution of `min Q(theta) s.t. X theta = y` in the form `theta* = (grad Q)^{-1}(X^T nu)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KktSolution {
    pub nu: Vec<f64>,
    pub theta_star: Vec<f64>,
    /// `||X theta* - y||_2`
    pub residual: f64,
    /// `||grad Q(theta*) - X^T nu||_2`
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Damped Newton on `F(nu) = X g(X^T nu) - y`, `g = (grad Q)^{-1}`, with
/// Jacobian `X diag(g'(X^T nu)) X^T` and backtracking (halving, Armijo on
/// `||F||^2`). Succeeds once `||F||_inf <= tol`.
pub fn solve_kkt_bias<E: Entropy + ?Sized>(loss: &QuadraticLoss, map: &E, tol: f64) -> Result<KktSolution> {
    let x = loss.x();
    let y = loss.y();
    if map.dim() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            found: map.dim(),
        });
    }
    let residual_at = |nu: &DVector<f64>| -> Option<(DVector<f64>, Vec<f64>, Vec<f64>)> {
        let eta: Vec<f64> = x.tr_mul(nu).data.into();
        let theta = map.gradient_inverse(&eta).ok()?;
        let f = x * DVector::from_column_slice(&theta) - y;
        f.iter().all(|v| v.is_finite()).then_some((f, theta, eta))
    };

    let mut nu = DVector::zeros(x.nrows());
    let (mut f, mut theta, mut eta) = residual_at(&nu).ok_or(Error::Domain {
        coordinate: 0,
        value: 0.0,
    })?;
    let mut iterations = 0;
    while f.amax() > tol {
        if iterations == NEWTON_MAX_ITERATIONS {
            return Err(Error::NewtonNonConvergence {
                iterations,
                residual: f.amax(),
            });
        }
        iterations += 1;
        let slope = DVector::from_vec(map.gradient_inverse_derivative(&eta)?);
        let mut scaled = x.clone();
        for (mut col, s) in scaled.column_iter_mut().zip(slope.iter()) {
            col *= *s;
        }
        let jac = &scaled * x.transpose();
        let step = jac.lu().solve(&(-&f)).ok_or(Error::RankDeficientJacobian)?;
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::RankDeficientJacobian);
        }
        let merit = f.norm_squared();
        let mut damping = 1.0;
        loop {
            let trial = &nu + &step * damping;
            if let Some((ft, tt, et)) = residual_at(&trial) {
                if ft.norm_squared() <= (1.0 - 2.0 * ARMIJO * damping) * merit {
                    nu = trial;
                    f = ft;
                    theta = tt;
                    eta = et;
                    break;
                }
            }
            damping *= 0.5;
            if damping < MIN_DAMPING {
                return Err(Error::NewtonNonConvergence {
                    iterations,
                    residual: f.amax(),
                });
            }
        }
    }
    let grad_q = DVector::from_vec(map.gradient(&theta)?);
    let kkt_residual = (grad_q - DVector::from_column_slice(&eta)).norm();
    Ok(KktSolution {
        nu: nu.data.into(),
        residual: f.norm(),
        theta_star: theta,
        kkt_residual,
        iterations,
    })
}

/// Exact `min ||theta||_1 s.t. X theta = y` by enumerating basic solutions:
/// every choice of `rank(X)` linearly independent columns. Returns the
/// minimum and a minimizer. Exponential in `d`; meant for `d <= 16` or so.
pub fn min_l1_norm(loss: &QuadraticLoss) -> Result<(f64, Vec<f64>)> {
    let x = loss.x();
    let y = loss.y();
    let d = x.ncols();
    if d > 20 {
        return Err(Error::Config(format!(
            "exhaustive L1 search limited to d <= 20, got {d}"
        )));
    }
    let sv = x.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return Err(Error::ZeroDesign);
    }
    let rank = sv.iter().filter(|&&s| s > 1e-12 * smax).count();
    let feas_tol = 1e-9 * y.norm().max(1.0);

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut support: Vec<usize> = (0..rank).collect();
    loop {
        let sub = DMatrix::from_fn(x.nrows(), rank, |r, c| x[(r, support[c])]);
        let svd = sub.clone().svd(true, true);
        let sub_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let independent = svd.singular_values.iter().all(|&s| s > 1e-12 * sub_max.max(smax));
        if independent {
            if let Ok(coef) = svd.solve(y, 0.0) {
                if (&sub * &coef - y).norm() <= feas_tol {
                    let l1: f64 = coef.iter().map(|v| v.abs()).sum();
                    if best.as_ref().is_none_or(|(b, _)| l1 < *b) {
                        let mut theta = vec![0.0; d];
                        for (c, &j) in support.iter().enumerate() {
                            theta[j] = coef[c];
                        }
                        best = Some((l1, theta));
                    }
                }
            }
        }
        if !next_combination(&mut support, d) {
            break;
        }
    }
    best.ok_or_else(|| Error::Config("y is not in the range of X".into()))
}

/// Advances `idx` to the next sorted `k`-subset of `0..n`.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    for pos in (0..k).rev() {
        if idx[pos] < n - k + pos {
            idx[pos] += 1;
            for p in pos + 1..k {
                idx[p] = idx[p - 1] + 1;
            }
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mirror::{DlnEntropy, RedundantEntropy};

    #[test]
    fn combinations_enumerate_all_subsets() {
        let mut idx = vec![0, 1];
        let mut count = 1;
        while next_combination(&mut idx, 5) {
            count += 1;
        }
        assert_eq!(count, 10);
        assert_eq!(idx, vec![3, 4]);
    }

    #[test]
    fn identity_design_inverts_directly() {
        let loss = QuadraticLoss::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.7, -0.2]).unwrap();
        let map = DlnEntropy::new(&[1.0, 0.5], &[0.0, 0.1]).unwrap();
        let sol = solve_kkt_bias(&loss, &map, 1e-13).unwrap();
        let expect = map.psi_inverse(&[0.7, -0.2]).unwrap();
        for (a, b) in sol.nu.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(sol.residual < 1e-12 && sol.kkt_residual < 1e-12);
    }

    #[test]
    fn redundant_map_solution_is_positive_and_feasible() {
        let loss = QuadraticLoss::from_rows(&[vec![0.4, 0.9, 0.2]], &[0.8]).unwrap();
        let map = RedundantEntropy::new(&[0.3, 0.5, 0.4], 3).unwrap();
        let sol = solve_kkt_bias(&loss, &map, 1e-12).unwrap();
        assert!(sol.theta_star.iter().all(|&t| t > 0.0));
        assert!(sol.residual < 1e-11);
    }

    #[test]
    fn rank_deficient_jacobian() {
        let loss = QuadraticLoss::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]], &[1.0, 2.0]).unwrap();
        let map = DlnEntropy::new(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!(matches!(
            solve_kkt_bias(&loss, &map, 1e-12),
            Err(Error::RankDeficientJacobian)
        ));
    }

    #[test]
    fn min_l1_small_cases() {
        // x1 + 2 x2 = 2: best is x2 = 1
        let loss = QuadraticLoss::from_rows(&[vec![1.0, 2.0]], &[2.0]).unwrap();
        let (l1, theta) = min_l1_norm(&loss).unwrap();
        assert!((l1 - 1.0).abs() < 1e-14);
        assert!((theta[1] - 1.0).abs() < 1e-14 && theta[0] == 0.0);
        // rank-deficient rows are handled through the rank
        let loss = QuadraticLoss::from_rows(&[vec![1.0, 2.0, 0.5], vec![2.0, 4.0, 1.0]], &[2.0, 4.0]).unwrap();
        assert!((min_l1_norm(&loss).unwrap().0 - 1.0).abs() < 1e-12);
    }
}
