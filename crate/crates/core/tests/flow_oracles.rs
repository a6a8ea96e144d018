use ddln_core::flow::{integrate, layer_rhs, theta_rhs, Method, StepController};
use ddln_core::model::{init_layers, InitScheme, LayerStack, Loss, QuadraticLoss};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn problem(n: usize, d: usize, entries: &[f64]) -> QuadraticLoss {
    let x = DMatrix::from_row_slice(n, d, &entries[..n * d]);
    let y = DVector::from_column_slice(&entries[n * d..n * d + n]);
    QuadraticLoss::new(x, y).unwrap()
}

fn stack(l: usize, d: usize, v: &[f64]) -> LayerStack {
    LayerStack::new((0..l).map(|j| v[j * d..(j + 1) * d].to_vec()).collect()).unwrap()
}

/// Loss written out row by row, no linear algebra.
fn plain_loss(rows: &[Vec<f64>], y: &[f64], theta: &[f64]) -> f64 {
    rows.iter()
        .zip(y)
        .map(|(r, yk)| {
            let p: f64 = r.iter().zip(theta).map(|(a, b)| a * b).sum();
            (p - yk).powi(2)
        })
        .sum()
}

fn composite(s: &[Vec<f64>], loss: &QuadraticLoss) -> f64 {
    let d = s[0].len();
    let theta: Vec<f64> = (0..d).map(|i| s.iter().map(|l| l[i]).product()).collect();
    loss.value(&theta).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_matches_rowwise_sum(v in prop::collection::vec(-1.0f64..1.0, 4 * 3 + 4 + 3)) {
        let rows: Vec<Vec<f64>> = (0..4).map(|r| v[r * 3..r * 3 + 3].to_vec()).collect();
        let y = &v[12..16];
        let theta = &v[16..19];
        let loss = QuadraticLoss::from_rows(&rows, y).unwrap();
        let expect = plain_loss(&rows, y, theta);
        prop_assert!((loss.value(theta).unwrap() - expect).abs() <= 1e-12 * expect.max(1.0));
    }

    #[test]
    fn gradient_matches_central_differences(v in prop::collection::vec(-1.0f64..1.0, 5 * 4 + 5 + 4)) {
        let loss = problem(5, 4, &v);
        let theta = &v[25..29];
        let g = loss.gradient(theta).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut p = theta.to_vec();
            let mut m = theta.to_vec();
            p[i] += h;
            m[i] -= h;
            let fd = (loss.value(&p).unwrap() - loss.value(&m).unwrap()) / (2.0 * h);
            prop_assert!((g[i] - fd).abs() <= 1e-6 * g[i].abs().max(1.0), "{} vs {}", g[i], fd);
        }
    }

    #[test]
    fn layer_rhs_is_minus_composite_gradient(v in prop::collection::vec(-1.0f64..1.0, 6 * 3 + 6 + 4 * 3)) {
        let loss = problem(6, 3, &v);
        let s = stack(4, 3, &v[24..]);
        let rhs = layer_rhs(&s, &loss).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            for i in 0..3 {
                let mut p = s.layers().to_vec();
                let mut m = s.layers().to_vec();
                p[j][i] += h;
                m[j][i] -= h;
                let fd = (composite(&p, &loss) - composite(&m, &loss)) / (2.0 * h);
                prop_assert!((rhs[j][i] + fd).abs() <= 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn theta_rhs_is_product_rule(v in prop::collection::vec(-1.5f64..1.5, 4 * 5 + 4 + 3 * 5)) {
        let loss = problem(4, 5, &v);
        let s = stack(3, 5, &v[24..]);
        let rhs = layer_rhs(&s, &loss).unwrap();
        let fast = theta_rhs(&s, &loss).unwrap();
        for i in 0..5 {
            let mut slow = 0.0;
            for (j, r) in rhs.iter().enumerate() {
                let others: f64 = (0..3).filter(|&k| k != j).map(|k| s.node(k, i)).product();
                slow += others * r[i];
            }
            prop_assert!((fast[i] - slow).abs() <= 1e-12 * slow.abs().max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn relabelling_layers_leaves_theta_unchanged(seed in 0u64..1000) {
        let loss = ddln_core::experiments::random_problem(6, 3, seed).unwrap();
        let s = init_layers(3, 4, &InitScheme::Uniform { scale: 1.0 }, seed).unwrap();
        let mut layers = s.layers().to_vec();
        layers.reverse();
        layers.swap(0, 2);
        let r = LayerStack::new(layers).unwrap();
        let ctrl = StepController::fixed(1e-2, 1.0);
        let a = integrate(&s, &loss, &ctrl).unwrap();
        let b = integrate(&r, &loss, &ctrl).unwrap();
        for (ta, tb) in a.thetas.iter().zip(&b.thetas) {
            for i in 0..3 {
                prop_assert!((ta[i] - tb[i]).abs() <= 1e-12 * ta[i].abs().max(1.0));
            }
        }
    }
}

/// `u' = -v (uv)`, `v' = -u (uv)` by explicit Euler with a tiny step.
fn euler_scalar(mut u: f64, mut v: f64, h: f64, t: f64) -> f64 {
    let steps = (t / h).round() as usize;
    for _ in 0..steps {
        let g = 2.0 * u * v;
        let (du, dv) = (-v * g, -u * g);
        u += h * du;
        v += h * dv;
    }
    u * v
}

#[test]
fn matches_tiny_step_euler() {
    let loss = QuadraticLoss::from_rows(&[vec![1.0]], &[0.0]).unwrap();
    let s = LayerStack::new(vec![vec![1.0], vec![2.0]]).unwrap();
    let traj = integrate(&s, &loss, &StepController::fixed(1e-3, 1.0)).unwrap();
    let oracle = euler_scalar(1.0, 2.0, 1e-6, 1.0);
    assert!((traj.final_theta()[0] - oracle).abs() <= 1e-5);
}

fn final_theta(s: &LayerStack, loss: &QuadraticLoss, h: f64, method: Method) -> Vec<f64> {
    let ctrl = StepController::fixed(h, 1.0).with_method(method);
    integrate(s, loss, &ctrl).unwrap().final_theta().to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn rk4_error_falls_sixteenfold_per_halving() {
    let loss = ddln_core::experiments::random_problem(5, 3, 2).unwrap();
    let s = init_layers(3, 3, &InitScheme::Uniform { scale: 1.0 }, 2).unwrap();
    let reference = final_theta(&s, &loss, 1.0 / 4096.0, Method::Rk4);
    let e1 = max_diff(&final_theta(&s, &loss, 1.0 / 32.0, Method::Rk4), &reference);
    let e2 = max_diff(&final_theta(&s, &loss, 1.0 / 64.0, Method::Rk4), &reference);
    let ratio = e1 / e2;
    assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn euler_error_halves_per_halving() {
    let loss = ddln_core::experiments::random_problem(5, 3, 2).unwrap();
    let s = init_layers(3, 3, &InitScheme::Uniform { scale: 1.0 }, 2).unwrap();
    let reference = final_theta(&s, &loss, 1.0 / 4096.0, Method::Rk4);
    let e1 = max_diff(&final_theta(&s, &loss, 1.0 / 512.0, Method::Euler), &reference);
    let e2 = max_diff(&final_theta(&s, &loss, 1.0 / 1024.0, Method::Euler), &reference);
    let ratio = e1 / e2;
    assert!((1.8..2.2).contains(&ratio), "ratio {ratio}");
}

#[test]
fn xi_is_the_integral_of_minus_the_gradient() {
    let loss = ddln_core::experiments::random_problem(6, 4, 9).unwrap();
    let s = init_layers(4, 3, &InitScheme::Uniform { scale: 1.0 }, 9).unwrap();
    let traj = integrate(&s, &loss, &StepController::fixed(1e-3, 2.0).with_max_snapshots(10_000)).unwrap();
    // composite trapezoid over the recorded gradients
    let mut acc = [0.0; 4];
    for k in 1..traj.len() {
        let dt = traj.times[k] - traj.times[k - 1];
        for (i, a) in acc.iter_mut().enumerate() {
            *a -= 0.5 * dt * (traj.gradients[k - 1][i] + traj.gradients[k][i]);
        }
        for (a, x) in acc.iter().zip(&traj.xi[k]) {
            assert!((a - x).abs() <= 1e-5);
        }
    }
}

#[test]
fn adaptive_and_fixed_agree() {
    let loss = ddln_core::experiments::random_problem(5, 4, 3).unwrap();
    let s = init_layers(4, 3, &InitScheme::Uniform { scale: 1.0 }, 3).unwrap();
    let fixed = integrate(&s, &loss, &StepController::fixed(1e-3, 3.0)).unwrap();
    let adaptive = integrate(&s, &loss, &StepController::adaptive(3.0)).unwrap();
    assert!(adaptive.steps < fixed.steps);
    assert!(max_diff(fixed.final_theta(), adaptive.final_theta()) <= 1e-6);
    assert_eq!(adaptive.final_time(), 3.0);
}
