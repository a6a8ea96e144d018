//! Gradient flow on the layers and the induced dynamic on `theta`.
//!
//! The integrator advances the augmented state `(u^1, ..., u^L, xi)` where
//! `xi' = -grad L(theta)`, so the dual variable is accumulated with the same
//! Runge-Kutta weights as the weights themselves.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{leave_one_out_products, theta_of_layers, LayerStack, Loss, ThetaVector};
use crate::report::fmt_g17;

/// Abort threshold on `||theta||_inf`. The continuous flow cannot blow up on a
/// quadratic loss, so crossing it means the discretization failed.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    Fixed,
    /// Step doubling with local error control.
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Rk4,
    /// Explicit Euler, kept for step-refinement studies.
    Euler,
}

impl Method {
    fn order(self) -> i32 {
        match self {
            Method::Rk4 => 4,
            Method::Euler => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepController {
    pub mode: StepMode,
    pub method: Method,
    /// Fixed step, or initial step in adaptive mode.
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
    pub t_max: f64,
    /// Upper bound on recorded snapshots (the integration grid itself is never thinned).
    pub max_snapshots: usize,
    /// Stop as soon as `L(theta) - L*` drops to this value.
    pub stop_gap: Option<f64>,
}

impl Default for StepController {
    fn default() -> Self {
        Self {
            mode: StepMode::Fixed,
            method: Method::Rk4,
            h: 1e-3,
            rtol: 1e-8,
            atol: 1e-10,
            t_max: 10.0,
            max_snapshots: 5000,
            stop_gap: None,
        }
    }
}

impl StepController {
    pub fn fixed(h: f64, t_max: f64) -> Self {
        Self {
            h,
            t_max,
            ..Self::default()
        }
    }

    pub fn adaptive(t_max: f64) -> Self {
        Self {
            mode: StepMode::Adaptive,
            t_max,
            ..Self::default()
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_max_snapshots(mut self, n: usize) -> Self {
        self.max_snapshots = n;
        self
    }

    pub fn with_stop_gap(mut self, gap: f64) -> Self {
        self.stop_gap = Some(gap);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidController(msg));
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad(format!("step must be positive, got {}", self.h));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.t_max));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if self.max_snapshots < 2 {
            return bad("need room for at least 2 snapshots".into());
        }
        Ok(())
    }
}

/// Which parameterization produced a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parameterization {
    /// `theta = u^1 ⊙ ... ⊙ u^L` with independent layers.
    Diagonal,
    /// `theta = u^{⊙L}` with a single shared vector; snapshots repeat `u` in every layer.
    Redundant,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub kind: Parameterization,
    pub times: Vec<f64>,
    pub states: Vec<LayerStack>,
    pub thetas: Vec<ThetaVector>,
    /// `xi(t) = -int_0^t grad L(theta(s)) ds`.
    pub xi: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    pub gradients: Vec<Vec<f64>>,
    pub optimal_loss: f64,
    /// Accepted integration steps (before snapshot thinning).
    pub steps: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    pub fn num_layers(&self) -> usize {
        self.states[0].num_layers()
    }

    pub fn initial_stack(&self) -> &LayerStack {
        &self.states[0]
    }

    pub fn final_theta(&self) -> &ThetaVector {
        self.thetas.last().expect("trajectory is never empty")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory is never empty")
    }

    /// `L(theta(t)) - L*` at every snapshot.
    pub fn gaps(&self) -> Vec<f64> {
        self.losses.iter().map(|l| l - self.optimal_loss).collect()
    }

    /// Writes `t,loss,theta_1..theta_d,xi_1..xi_d[,u_j_i...]`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W, include_layers: bool) -> Result<()> {
        self.write_csv_every(w, include_layers, 1)
    }

    /// Like [`Trajectory::write_csv`] but keeps only every `stride`-th
    /// snapshot, plus the last one.
    pub fn write_csv_every<W: Write>(&self, mut w: W, include_layers: bool, stride: usize) -> Result<()> {
        let stride = stride.max(1);
        let d = self.dim();
        let mut header = vec!["t".to_string(), "loss".to_string()];
        header.extend((1..=d).map(|i| format!("theta_{i}")));
        header.extend((1..=d).map(|i| format!("xi_{i}")));
        if include_layers {
            for j in 1..=self.num_layers() {
                header.extend((1..=d).map(|i| format!("u_{j}_{i}")));
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for k in (0..self.len()).filter(|k| k % stride == 0 || k + 1 == self.len()) {
            let mut row = vec![fmt_g17(self.times[k]), fmt_g17(self.losses[k])];
            row.extend(self.thetas[k].iter().map(|&v| fmt_g17(v)));
            row.extend(self.xi[k].iter().map(|&v| fmt_g17(v)));
            if include_layers {
                row.extend(self.states[k].layers().iter().flatten().map(|&v| fmt_g17(v)));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Right-hand side of the layer flow: `du^j/dt = -(prod_{k != j} u^k) ⊙ grad L(theta)`.
pub fn layer_rhs<L: Loss + ?Sized>(stack: &LayerStack, loss: &L) -> Result<Vec<Vec<f64>>> {
    let grad = loss.gradient(&theta_of_layers(stack))?;
    let (nl, d) = (stack.num_layers(), stack.dim());
    let mut out = vec![vec![0.0; d]; nl];
    let mut loo = vec![0.0; nl];
    for i in 0..d {
        leave_one_out_products(&stack.column(i), &mut loo);
        for j in 0..nl {
            out[j][i] = -loo[j] * grad[i];
        }
    }
    Ok(out)
}

/// Right-hand side of the induced dynamic `theta' = -M(u) grad L(theta)`.
pub fn theta_rhs<L: Loss + ?Sized>(stack: &LayerStack, loss: &L) -> Result<Vec<f64>> {
    let grad = loss.gradient(&theta_of_layers(stack))?;
    let m = crate::conservation::m_matrix(stack);
    Ok(m.iter().zip(&grad).map(|(m, g)| -m * g).collect())
}

/// Integrates the gradient flow of `u ↦ L(u^1 ⊙ ... ⊙ u^L)` from `stack0`.
pub fn integrate<L: Loss + ?Sized>(stack0: &LayerStack, loss: &L, ctrl: &StepController) -> Result<Trajectory> {
    check_loss_dim(stack0.dim(), loss)?;
    let system = DiagonalSystem {
        num_layers: stack0.num_layers(),
        dim: stack0.dim(),
    };
    drive(&system, stack0.to_layer_major(), loss, ctrl)
}

/// Integrates the gradient flow of `u ↦ L(u^{⊙L})` for the redundant network,
/// `u' = -L u^{⊙(L-1)} ⊙ grad L(theta)`.
pub fn integrate_redundant<L: Loss + ?Sized>(
    u0: &[f64],
    num_layers: usize,
    loss: &L,
    ctrl: &StepController,
) -> Result<Trajectory> {
    if num_layers < 2 {
        return Err(Error::InvalidStack(format!("need at least 2 layers, got {num_layers}")));
    }
    if u0.is_empty() {
        return Err(Error::InvalidStack("empty weight vector".into()));
    }
    check_loss_dim(u0.len(), loss)?;
    let system = RedundantSystem {
        num_layers,
        dim: u0.len(),
    };
    drive(&system, u0.to_vec(), loss, ctrl)
}

fn check_loss_dim<L: Loss + ?Sized>(dim: usize, loss: &L) -> Result<()> {
    if loss.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: loss.dim(),
            found: dim,
        });
    }
    Ok(())
}

trait FlowSystem {
    const KIND: Parameterization;
    fn dim(&self) -> usize;
    fn param_len(&self) -> usize;
    fn snapshot(&self, params: &[f64]) -> LayerStack;
    fn theta(&self, params: &[f64]) -> Vec<f64>;
    /// Writes the parameter velocity given `grad L(theta)`.
    fn param_rhs(&self, params: &[f64], grad: &[f64], out: &mut [f64]);
}

struct DiagonalSystem {
    num_layers: usize,
    dim: usize,
}

impl FlowSystem for DiagonalSystem {
    const KIND: Parameterization = Parameterization::Diagonal;

    fn dim(&self) -> usize {
        self.dim
    }

    fn param_len(&self) -> usize {
        self.num_layers * self.dim
    }

    fn snapshot(&self, params: &[f64]) -> LayerStack {
        LayerStack::from_layer_major(params, self.num_layers, self.dim)
    }

    fn theta(&self, params: &[f64]) -> Vec<f64> {
        let mut theta = vec![1.0; self.dim];
        for layer in params.chunks_exact(self.dim) {
            for (t, u) in theta.iter_mut().zip(layer) {
                *t *= u;
            }
        }
        theta
    }

    fn param_rhs(&self, params: &[f64], grad: &[f64], out: &mut [f64]) {
        let (nl, d) = (self.num_layers, self.dim);
        let mut col = vec![0.0; nl];
        let mut loo = vec![0.0; nl];
        for i in 0..d {
            for j in 0..nl {
                col[j] = params[j * d + i];
            }
            leave_one_out_products(&col, &mut loo);
            for j in 0..nl {
                out[j * d + i] = -loo[j] * grad[i];
            }
        }
    }
}

struct RedundantSystem {
    num_layers: usize,
    dim: usize,
}

impl FlowSystem for RedundantSystem {
    const KIND: Parameterization = Parameterization::Redundant;

    fn dim(&self) -> usize {
        self.dim
    }

    fn param_len(&self) -> usize {
        self.dim
    }

    fn snapshot(&self, params: &[f64]) -> LayerStack {
        LayerStack::from_layer_major(&params.repeat(self.num_layers), self.num_layers, self.dim)
    }

    fn theta(&self, params: &[f64]) -> Vec<f64> {
        // same multiplication order as theta_of_layers on the snapshot
        params
            .iter()
            .map(|&u| (0..self.num_layers).fold(1.0, |acc, _| acc * u))
            .collect()
    }

    fn param_rhs(&self, params: &[f64], grad: &[f64], out: &mut [f64]) {
        let l = self.num_layers as f64;
        for i in 0..self.dim {
            out[i] = -l * params[i].powi(self.num_layers as i32 - 1) * grad[i];
        }
    }
}

/// Augmented vector field `z = (params, xi)`.
struct Augmented<'a, S, L: ?Sized> {
    system: &'a S,
    loss: &'a L,
}

impl<S: FlowSystem, L: Loss + ?Sized> Augmented<'_, S, L> {
    fn eval(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let p = self.system.param_len();
        let theta = self.system.theta(&z[..p]);
        let grad = self.loss.gradient(&theta)?;
        let (dp, dxi) = out.split_at_mut(p);
        self.system.param_rhs(&z[..p], &grad, dp);
        for (o, g) in dxi.iter_mut().zip(&grad) {
            *o = -g;
        }
        Ok(())
    }

    fn step(&self, method: Method, z: &[f64], h: f64) -> Result<Vec<f64>> {
        let n = z.len();
        let mut k1 = vec![0.0; n];
        self.eval(z, &mut k1)?;
        match method {
            Method::Euler => Ok(z.iter().zip(&k1).map(|(a, k)| a + h * k).collect()),
            Method::Rk4 => {
                let axpy = |k: &[f64], c: f64| -> Vec<f64> { z.iter().zip(k).map(|(a, k)| a + c * k).collect() };
                let mut k2 = vec![0.0; n];
                self.eval(&axpy(&k1, 0.5 * h), &mut k2)?;
                let mut k3 = vec![0.0; n];
                self.eval(&axpy(&k2, 0.5 * h), &mut k3)?;
                let mut k4 = vec![0.0; n];
                self.eval(&axpy(&k3, h), &mut k4)?;
                Ok((0..n)
                    .map(|i| z[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                    .collect())
            }
        }
    }
}

struct Recorder<'a, S, L: ?Sized> {
    system: &'a S,
    loss: &'a L,
    traj: Trajectory,
    stride: usize,
    max: usize,
}

impl<S: FlowSystem, L: Loss + ?Sized> Recorder<'_, S, L> {
    fn push(&mut self, t: f64, z: &[f64]) -> Result<()> {
        let p = self.system.param_len();
        let stack = self.system.snapshot(&z[..p]);
        let theta = theta_of_layers(&stack);
        self.traj.losses.push(self.loss.value(&theta)?);
        self.traj.gradients.push(self.loss.gradient(&theta)?);
        self.traj.times.push(t);
        self.traj.states.push(stack);
        self.traj.thetas.push(theta);
        self.traj.xi.push(z[p..].to_vec());
        Ok(())
    }

    /// Keeps every other snapshot (always the first) and doubles the stride.
    fn thin(&mut self) {
        fn halve<T>(v: &mut Vec<T>) {
            let mut k = 0;
            v.retain(|_| {
                k += 1;
                (k - 1) % 2 == 0
            });
        }
        let t = &mut self.traj;
        halve(&mut t.times);
        halve(&mut t.states);
        halve(&mut t.thetas);
        halve(&mut t.xi);
        halve(&mut t.losses);
        halve(&mut t.gradients);
        self.stride *= 2;
    }

    fn drop_second_to_last(&mut self) {
        let t = &mut self.traj;
        let k = t.times.len() - 2;
        t.times.remove(k);
        t.states.remove(k);
        t.thetas.remove(k);
        t.xi.remove(k);
        t.losses.remove(k);
        t.gradients.remove(k);
    }

    /// Records step `step` (counted from 1) if it falls on the stride or is final.
    fn record(&mut self, step: usize, t: f64, z: &[f64], last: bool) -> Result<()> {
        if step.is_multiple_of(self.stride) {
            self.push(t, z)?;
            if self.traj.len() > self.max {
                self.thin();
            }
            if last && self.traj.times.last() != Some(&t) {
                self.push(t, z)?;
            }
        } else if last {
            self.push(t, z)?;
        }
        if last && self.traj.len() > self.max {
            self.drop_second_to_last();
        }
        Ok(())
    }
}

fn drive<S: FlowSystem, L: Loss + ?Sized>(
    system: &S,
    params0: Vec<f64>,
    loss: &L,
    ctrl: &StepController,
) -> Result<Trajectory> {
    ctrl.validate()?;
    let d = system.dim();
    let mut z = params0;
    z.extend(std::iter::repeat_n(0.0, d));
    let field = Augmented { system, loss };
    let optimal = loss.optimal_value();

    let mut rec = Recorder {
        system,
        loss,
        traj: Trajectory {
            kind: S::KIND,
            times: Vec::new(),
            states: Vec::new(),
            thetas: Vec::new(),
            xi: Vec::new(),
            losses: Vec::new(),
            gradients: Vec::new(),
            optimal_loss: optimal,
            steps: 0,
        },
        stride: 1,
        max: ctrl.max_snapshots,
    };
    rec.push(0.0, &z)?;
    if let Some(gap) = ctrl.stop_gap {
        if rec.traj.losses[0] - optimal <= gap {
            return Ok(rec.traj);
        }
    }

    let p = system.param_len();
    let t_end = ctrl.t_max;
    let end_slack = 1e-12 * t_end;
    let mut t = 0.0;
    let mut h = ctrl.h;
    let mut step = 0usize;
    let check = |z: &[f64], t: f64| -> Result<()> {
        let theta = system.theta(&z[..p]);
        let bad = z.iter().any(|v| !v.is_finite()) || theta.iter().any(|v| v.abs() > DIVERGENCE_LIMIT);
        if bad {
            Err(Error::Divergence { t })
        } else {
            Ok(())
        }
    };

    while t_end - t > end_slack {
        let (t_new, z_new) = match ctrl.mode {
            StepMode::Fixed => {
                let h_try = ctrl.h.min(t_end - t);
                let z_new = field.step(ctrl.method, &z, h_try)?;
                // grid points are k*h, not an accumulated sum
                let t_new = if t_end - (t + h_try) <= end_slack {
                    t_end
                } else {
                    (step + 1) as f64 * ctrl.h
                };
                (t_new, z_new)
            }
            StepMode::Adaptive => {
                let q = ctrl.method.order();
                loop {
                    let h_try = h.min(t_end - t);
                    if h_try < 1e-14 * t.abs().max(1.0) {
                        return Err(Error::StepSizeUnderflow { t, h: h_try });
                    }
                    let coarse = field.step(ctrl.method, &z, h_try);
                    let fine = field
                        .step(ctrl.method, &z, 0.5 * h_try)
                        .and_then(|mid| field.step(ctrl.method, &mid, 0.5 * h_try));
                    let err = match (coarse, &fine) {
                        (Ok(c), Ok(f)) => error_norm(&c, f, &z, ctrl, q),
                        _ => f64::INFINITY,
                    };
                    if err.is_finite() && err <= 1.0 {
                        let grow = if err == 0.0 {
                            5.0
                        } else {
                            (0.9 * err.powf(-1.0 / (q + 1) as f64)).clamp(0.2, 5.0)
                        };
                        let t_new = if t_end - (t + h_try) <= end_slack {
                            t_end
                        } else {
                            t + h_try
                        };
                        h = h_try * grow;
                        break (t_new, fine?);
                    }
                    let shrink = if err.is_finite() {
                        (0.9 * err.powf(-1.0 / (q + 1) as f64)).clamp(0.1, 0.5)
                    } else {
                        0.25
                    };
                    h = h_try * shrink;
                }
            }
        };
        check(&z_new, t_new)?;
        z = z_new;
        t = t_new;
        step += 1;
        rec.traj.steps = step;

        let finished = t_end - t <= end_slack;
        let converged = match ctrl.stop_gap {
            Some(gap) => loss.value(&system.theta(&z[..p]))? - optimal <= gap,
            None => false,
        };
        rec.record(step, t, &z, finished || converged)?;
        if converged {
            break;
        }
    }
    Ok(rec.traj)
}

fn error_norm(coarse: &[f64], fine: &[f64], start: &[f64], ctrl: &StepController, order: i32) -> f64 {
    let denom = 2f64.powi(order) - 1.0;
    coarse
        .iter()
        .zip(fine)
        .zip(start)
        .map(|((c, f), s)| {
            let scale = ctrl.atol + ctrl.rtol * s.abs().max(f.abs());
            (f - c).abs() / denom / scale
        })
        .fold(0.0, f64::max)
}
