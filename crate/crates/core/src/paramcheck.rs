//! Numerical certification of the structure behind the mirror-flow result:
//! the map `G: R^{L·d} -> R^d`, `G_i(w) = prod of block i`, is a commuting and
//! regular parameterization on
//! `M = { w : every block has at most one zero entry }`.
//!
//! The remaining hypothesis (flows of the gradient fields `grad G_i` have
//! pairwise symmetric domains) holds by structure: the fields of different
//! coordinates act on disjoint blocks. There is nothing finite to compute for
//! it, so it is not checked numerically.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::conservation::check_assumption_a;
use crate::error::{Error, Result};
use crate::flow::Trajectory;
use crate::model::{init_layers, leave_one_out_products, seeded_rng, InitScheme, LayerStack, ThetaVector};

/// Singular values below `RANK_TOL * sigma_max` count as zero.
pub const RANK_TOL: f64 = 1e-10;

/// Coordinate-major flattening: block `i` holds `u^1_i, ..., u^L_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParams {
    w: Vec<f64>,
    num_layers: usize,
    dim: usize,
}

impl FlatParams {
    pub fn new(w: Vec<f64>, num_layers: usize, dim: usize) -> Result<Self> {
        if num_layers == 0 || dim == 0 {
            return Err(Error::InvalidStack("empty parameterization".into()));
        }
        if w.len() != num_layers * dim {
            return Err(Error::DimensionMismatch {
                expected: num_layers * dim,
                found: w.len(),
            });
        }
        Ok(Self { w, num_layers, dim })
    }

    pub fn from_stack(stack: &LayerStack) -> Self {
        let (nl, d) = (stack.num_layers(), stack.dim());
        let w = (0..d).flat_map(|i| (0..nl).map(move |j| stack.node(j, i))).collect();
        Self {
            w,
            num_layers: nl,
            dim: d,
        }
    }

    pub fn to_stack(&self) -> Result<LayerStack> {
        let layers = (0..self.num_layers)
            .map(|j| (0..self.dim).map(|i| self.w[i * self.num_layers + j]).collect())
            .collect();
        LayerStack::new(layers)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.w[i * self.num_layers..(i + 1) * self.num_layers]
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.dim {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.dim,
            });
        }
        Ok(())
    }
}

/// A twice-differentiable map `R^n -> R^m` given by its coordinate gradients
/// and Hessians.
pub trait SmoothMap {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn gradient(&self, w: &[f64], i: usize) -> DVector<f64>;
    fn hessian(&self, w: &[f64], i: usize) -> DMatrix<f64>;
}

/// `G` of the deep diagonal network with the given shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockProducts {
    pub num_layers: usize,
    pub dim: usize,
}

impl SmoothMap for BlockProducts {
    fn input_len(&self) -> usize {
        self.num_layers * self.dim
    }

    fn output_len(&self) -> usize {
        self.dim
    }

    fn gradient(&self, w: &[f64], i: usize) -> DVector<f64> {
        let nl = self.num_layers;
        let mut g = DVector::zeros(nl * self.dim);
        let mut loo = vec![0.0; nl];
        leave_one_out_products(&w[i * nl..(i + 1) * nl], &mut loo);
        for (j, v) in loo.into_iter().enumerate() {
            g[i * nl + j] = v;
        }
        g
    }

    fn hessian(&self, w: &[f64], i: usize) -> DMatrix<f64> {
        let nl = self.num_layers;
        let n = nl * self.dim;
        let block = &w[i * nl..(i + 1) * nl];
        let mut h = DMatrix::zeros(n, n);
        for a in 0..nl {
            for b in (a + 1)..nl {
                let v: f64 = block
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != a && k != b)
                    .map(|(_, x)| x)
                    .product();
                h[(i * nl + a, i * nl + b)] = v;
                h[(i * nl + b, i * nl + a)] = v;
            }
        }
        h
    }
}

/// Control map `G(w) = (w1 w2, w1 w3)`: both outputs share `w1`, so it is not
/// commuting. Used to validate the detector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SharedFactorControl;

impl SmoothMap for SharedFactorControl {
    fn input_len(&self) -> usize {
        3
    }

    fn output_len(&self) -> usize {
        2
    }

    fn gradient(&self, w: &[f64], i: usize) -> DVector<f64> {
        match i {
            0 => DVector::from_vec(vec![w[1], w[0], 0.0]),
            _ => DVector::from_vec(vec![w[2], 0.0, w[0]]),
        }
    }

    fn hessian(&self, _w: &[f64], i: usize) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(3, 3);
        let k = if i == 0 { 1 } else { 2 };
        h[(0, k)] = 1.0;
        h[(k, 0)] = 1.0;
        h
    }
}

pub fn g_eval(w: &FlatParams) -> ThetaVector {
    (0..w.dim)
        .map(|i| w.block(i).iter().product::<f64>())
        .collect::<Vec<_>>()
        .into()
}

/// `grad G_i`: leave-one-out products on block `i`, zero elsewhere.
pub fn g_gradient(w: &FlatParams, i: usize) -> Result<DVector<f64>> {
    w.check_index(i)?;
    Ok(shape_of(w).gradient(&w.w, i))
}

pub fn g_hessian(w: &FlatParams, i: usize) -> Result<DMatrix<f64>> {
    w.check_index(i)?;
    Ok(shape_of(w).hessian(&w.w, i))
}

fn shape_of(w: &FlatParams) -> BlockProducts {
    BlockProducts {
        num_layers: w.num_layers,
        dim: w.dim,
    }
}

/// `||H_{i1} grad G_{i2} - H_{i2} grad G_{i1}||_inf` for any smooth map.
pub fn commuting_defect_of<P: SmoothMap + ?Sized>(map: &P, w: &[f64], i1: usize, i2: usize) -> Result<f64> {
    for i in [i1, i2] {
        if i >= map.output_len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: map.output_len(),
            });
        }
    }
    if w.len() != map.input_len() {
        return Err(Error::DimensionMismatch {
            expected: map.input_len(),
            found: w.len(),
        });
    }
    let lhs = map.hessian(w, i1) * map.gradient(w, i2);
    let rhs = map.hessian(w, i2) * map.gradient(w, i1);
    Ok((lhs - rhs).amax())
}

pub fn commuting_defect(w: &FlatParams, i1: usize, i2: usize) -> Result<f64> {
    commuting_defect_of(&shape_of(w), &w.w, i1, i2)
}

/// `J_G(w)`, `d × L·d`.
pub fn jacobian(w: &FlatParams) -> DMatrix<f64> {
    let shape = shape_of(w);
    let mut j = DMatrix::zeros(w.dim, w.w.len());
    for i in 0..w.dim {
        j.set_row(i, &shape.gradient(&w.w, i).transpose());
    }
    j
}

/// Numerical rank of `J_G(w)`: singular values at least `tol * sigma_max`.
pub fn jacobian_rank(w: &FlatParams, tol: f64) -> usize {
    let sv = jacobian(w).singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s >= tol * smax).count()
}

/// Every block has at most one zero entry.
pub fn manifold_membership(w: &FlatParams) -> bool {
    (0..w.dim).all(|i| w.block(i).iter().filter(|&&x| x == 0.0).count() <= 1)
}

pub fn flow_stays_on_manifold(traj: &Trajectory) -> bool {
    traj.states
        .iter()
        .all(|s| manifold_membership(&FlatParams::from_stack(s)))
}

/// One line of the certification table.
#[derive(Clone, Debug, PartialEq)]
pub struct ClaimCheck {
    pub claim: &'static str,
    pub passed: bool,
    /// Worst observed defect (or error) for the claim.
    pub worst: f64,
    pub samples: usize,
}

/// Draws random points of `M` (some blocks carrying one zero) and checks
/// derivatives, the commuting property, regularity and the bridge from
/// assumption (A).
pub fn certify(num_layers: usize, dim: usize, samples: usize, seed: u64) -> Result<Vec<ClaimCheck>> {
    if num_layers < 2 || dim == 0 || samples == 0 {
        return Err(Error::Config("certification needs L >= 2, d >= 1, samples >= 1".into()));
    }
    let mut rng = seeded_rng(seed, 7);
    let n = num_layers * dim;
    let shape = BlockProducts { num_layers, dim };
    let mut on_manifold = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        for i in 0..dim {
            if rng.random_bool(0.3) {
                w[i * num_layers + rng.random_range(0..num_layers)] = 0.0;
            }
        }
        on_manifold.push(FlatParams::new(w, num_layers, dim)?);
    }

    let mut grad_err: f64 = 0.0;
    let mut hess_err: f64 = 0.0;
    for w in &on_manifold {
        for i in 0..dim {
            let g = shape.gradient(&w.w, i);
            let fd = central_gradient(|x| x[i * num_layers..(i + 1) * num_layers].iter().product(), &w.w);
            grad_err = grad_err.max(relative_gap(g.as_slice(), &fd));
            let h = shape.hessian(&w.w, i);
            for c in 0..n {
                let col = central_gradient(|x| shape.gradient(x, i)[c], &w.w);
                hess_err = hess_err.max(relative_gap(h.column(c).as_slice(), &col));
            }
        }
    }

    let mut commute: f64 = 0.0;
    let mut symmetric = true;
    for w in &on_manifold {
        for i1 in 0..dim {
            symmetric &= g_hessian(w, i1)? == g_hessian(w, i1)?.transpose();
            for i2 in 0..dim {
                commute = commute.max(commuting_defect(w, i1, i2)?);
            }
        }
    }

    let rank_ok = on_manifold.iter().filter(|w| jacobian_rank(w, RANK_TOL) == dim).count();

    let mut deficit_ok = 0;
    for w in &on_manifold {
        let mut bad = w.w.clone();
        let i = rng.random_range(0..dim);
        bad[i * num_layers] = 0.0;
        bad[i * num_layers + 1] = 0.0;
        let bad = FlatParams::new(bad, num_layers, dim)?;
        if !manifold_membership(&bad) && jacobian_rank(&bad, RANK_TOL) == dim - 1 {
            deficit_ok += 1;
        }
    }

    let control = SharedFactorControl;
    let mut control_min = f64::INFINITY;
    for _ in 0..samples {
        let w: Vec<f64> = (0..3)
            .map(|_| rng.random_range(0.1..=1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        control_min = control_min.min(commuting_defect_of(&control, &w, 0, 1)?);
    }

    let mut bridge_ok = 0;
    for s in 0..samples {
        let stack = init_layers(
            dim,
            num_layers,
            &InitScheme::Uniform { scale: 1.0 },
            seed.wrapping_add(s as u64),
        )?;
        if !check_assumption_a(&stack).holds() || manifold_membership(&FlatParams::from_stack(&stack)) {
            bridge_ok += 1;
        }
    }

    Ok(vec![
        ClaimCheck {
            claim: "gradient matches finite differences",
            passed: grad_err <= 1e-6,
            worst: grad_err,
            samples,
        },
        ClaimCheck {
            claim: "hessian matches finite differences",
            passed: hess_err <= 1e-6,
            worst: hess_err,
            samples,
        },
        ClaimCheck {
            claim: "commuting defect is exactly zero",
            passed: commute == 0.0 && symmetric,
            worst: commute,
            samples,
        },
        ClaimCheck {
            claim: "jacobian has rank d on M",
            passed: rank_ok == samples,
            worst: (samples - rank_ok) as f64,
            samples,
        },
        ClaimCheck {
            claim: "rank drops off M",
            passed: deficit_ok == samples,
            worst: (samples - deficit_ok) as f64,
            samples,
        },
        ClaimCheck {
            claim: "control map is flagged non-commuting",
            passed: control_min > 1e-3,
            worst: control_min,
            samples,
        },
        ClaimCheck {
            claim: "assumption (A) inits lie in M",
            passed: bridge_ok == samples,
            worst: (samples - bridge_ok) as f64,
            samples,
        },
    ])
}

/// Central differences with step `1e-6`.
fn central_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    const STEP: f64 = 1e-6;
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + STEP;
            let up = f(&p);
            p[k] = x[k] - STEP;
            let down = f(&p);
            p[k] = x[k];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// `||a - b||_inf / max(||a||_inf, 1)`.
fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(w: &[f64], nl: usize, d: usize) -> FlatParams {
        FlatParams::new(w.to_vec(), nl, d).unwrap()
    }

    #[test]
    fn flattening_is_coordinate_major() {
        let s = LayerStack::new(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let w = FlatParams::from_stack(&s);
        assert_eq!(w.as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(w.to_stack().unwrap(), s);
        assert!(FlatParams::new(vec![1.0; 5], 2, 3).is_err());
    }

    #[test]
    fn g_eval_examples() {
        assert_eq!(&*g_eval(&flat(&[1.0, 3.0, 2.0, 4.0], 2, 2)), &[3.0, 8.0]);
        assert_eq!(g_eval(&flat(&[1.0, 3.0, 0.0, 4.0], 2, 2))[1], 0.0);
    }

    #[test]
    fn gradient_examples() {
        let g = g_gradient(&flat(&[2.0, 3.0], 2, 1), 0).unwrap();
        assert_eq!(g.as_slice(), &[3.0, 2.0]);
        let w = flat(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2);
        let g = g_gradient(&w, 1).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0, 0.0, 30.0, 24.0, 20.0]);
        assert!(matches!(
            g_gradient(&w, 2),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
    }

    #[test]
    fn hessian_examples() {
        let h = g_hessian(&flat(&[0.7, -1.9], 2, 1), 0).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let w = flat(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2);
        let h = g_hessian(&w, 0).unwrap();
        assert_eq!(h, h.transpose());
        assert_eq!(h[(0, 1)], 3.0);
        assert_eq!(h[(0, 2)], 2.0);
        assert_eq!(h[(1, 2)], 1.0);
        assert!((0..6).all(|k| h[(k, k)] == 0.0));
        assert!((3..6).all(|k| h.row(k).iter().all(|&v| v == 0.0)));
        assert!(g_hessian(&w, 5).is_err());
    }

    #[test]
    fn commuting_defect_is_exactly_zero() {
        let w = flat(&[0.3, -1.2, 0.8, 2.0, 0.0, -0.4, 1.1, 0.9, -0.6], 3, 3);
        for i1 in 0..3 {
            for i2 in 0..3 {
                assert_eq!(commuting_defect(&w, i1, i2).unwrap(), 0.0);
            }
        }
        assert!(commuting_defect(&w, 0, 3).is_err());
    }

    #[test]
    fn control_map_is_flagged() {
        let d = commuting_defect_of(&SharedFactorControl, &[0.5, 0.2, -0.7], 0, 1).unwrap();
        assert!((d - 0.7).abs() < 1e-15);
        assert_eq!(
            commuting_defect_of(&SharedFactorControl, &[0.5, 0.2, -0.7], 1, 1).unwrap(),
            0.0
        );
    }

    #[test]
    fn rank_and_membership() {
        let w = flat(&[0.3, -1.2, 0.8, 2.0, 0.0, -0.4], 3, 2);
        assert!(manifold_membership(&w));
        assert_eq!(jacobian_rank(&w, RANK_TOL), 2);
        let w = flat(&[0.3, -1.2, 0.8, 0.0, 0.0, -0.4], 3, 2);
        assert!(!manifold_membership(&w));
        assert_eq!(jacobian_rank(&w, RANK_TOL), 1);
        assert_eq!(jacobian_rank(&flat(&[0.0; 6], 3, 2), RANK_TOL), 0);
    }

    #[test]
    fn certification_passes() {
        let table = certify(4, 3, 20, 5).unwrap();
        for c in &table {
            assert!(c.passed, "{c:?}");
        }
        assert!(certify(1, 3, 20, 5).is_err());
    }
}
