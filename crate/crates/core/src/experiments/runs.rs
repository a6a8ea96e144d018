use std::io::Write;
use std::thread;

use crate::conservation::{
    check_assumption_a, conservation_defect, m_bound_violations, reconstruction_error, sigma_lower_bound, sign_census,
    SignCensus,
};
use crate::error::{Error, Result};
use crate::flow::{integrate, integrate_redundant, StepController, Trajectory};
use crate::mirror::{mirror_residual_closed_form, mirror_residual_general, DlnEntropy, MirrorMap, RedundantEntropy};
use crate::model::{init_layers, LayerStack, QuadraticLoss};
use crate::paramcheck::certify;
use crate::report::{fmt_g17, DiagnosticsReport, Section};

use super::config::{Experiment, ExperimentConfig};
use super::kkt::{min_l1_norm, solve_kkt_bias};
use super::pl::{check_rate, pl_constant, time_to_gap, RateCheck};
use super::{positive_interpolation_problem, random_problem, sparse_interpolation_problem};

/// Init scales of the convergence sweep.
pub const FIG3_SCALES: [f64; 3] = [1.0, 1.4, 1.8];
/// Init scales of the two-layer bias sweep, from large to small.
pub const BIAS_ALPHAS: [f64; 4] = [10.0, 1.0, 0.1, 0.01];

const CONSERVATION_TOL: f64 = 1e-6;
const RECONSTRUCTION_TOL: f64 = 1e-6;
const CLOSED_FORM_TOL: f64 = 1e-5;
const GENERAL_RESIDUAL_TOL: f64 = 1e-4;
/// Every step is kept up to this many so that difference quotients use spacing `h`.
const MAX_SIMULATE_SNAPSHOTS: usize = 1_000_000;
/// Rough cap on rows of the simulate CSV.
const SIMULATE_CSV_ROWS: usize = 5000;
const M_BOUND_REL: f64 = 1e-9;
const CONVERGENCE_STOP_GAP: f64 = 1e-8;
const TARGET_GAP: f64 = 1e-6;
const BIAS_STOP_GAP: f64 = 1e-10;
const BIAS_SPARSITY: usize = 2;
const KKT_TOL: f64 = 1e-11;
const MISMATCH_TOL: f64 = 1e-3;
const SWEEP_TOL: f64 = 0.05;

/// One named pass/fail line of a run summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// `None` for yes/no checks.
    pub threshold: Option<f64>,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            threshold: Some(threshold),
            passed: value <= threshold,
        }
    }

    fn holds(name: &str, passed: bool) -> Self {
        Self {
            name: name.to_string(),
            value: if passed { 1.0 } else { 0.0 },
            threshold: None,
            passed,
        }
    }
}

/// Common face of every experiment result.
pub trait Report {
    fn checks(&self) -> &[Check];
    fn diagnostics(&self) -> &DiagnosticsReport;
    /// The experiment's main CSV.
    fn write_csv(&self, w: &mut dyn Write) -> Result<()>;

    fn passed(&self) -> bool {
        self.checks().iter().all(|c| c.passed)
    }
}

fn checks_section(checks: &[Check]) -> Section {
    let mut s = Section::new("checks", &["check", "value", "threshold", "passed"]);
    for c in checks {
        s.row([
            c.name.clone(),
            fmt_g17(c.value),
            c.threshold.map(fmt_g17).unwrap_or_default(),
            c.passed.to_string(),
        ]);
    }
    s
}

fn census_section(census: &SignCensus) -> Section {
    let mut s = Section::new(
        "sign_census",
        &["coordinate", "min_layer", "crossing_layers", "violations"],
    );
    for (i, layers) in census.crossings.iter().enumerate() {
        let joined: Vec<String> = layers.iter().map(|j| (j + 1).to_string()).collect();
        let bad = census.violations.iter().filter(|(c, _)| *c == i).count();
        s.row([
            (i + 1).to_string(),
            (census.min_layer[i] + 1).to_string(),
            joined.join(";"),
            bad.to_string(),
        ]);
    }
    s
}

fn rate_section(name: &str, rows: &[(String, &RateCheck)]) -> Section {
    let mut s = Section::new(name, &["run", "sigma", "mu", "violations", "worst_ratio"]);
    for (label, r) in rows {
        s.row([
            label.clone(),
            fmt_g17(r.sigma),
            fmt_g17(r.mu),
            r.violations.to_string(),
            fmt_g17(r.worst_ratio),
        ]);
    }
    s
}

fn max_entry(m: &nalgebra::DMatrix<f64>) -> f64 {
    m.iter().cloned().fold(0.0, f64::max)
}

fn layers_for(cfg: &ExperimentConfig, scale: f64) -> Result<LayerStack> {
    init_layers(cfg.dim, cfg.layers, &cfg.init.scheme(scale), cfg.seed)
}

/// Plain flow run with every invariant checked.
#[derive(Clone, Debug)]
pub struct SimulationReport {
    pub trajectory: Trajectory,
    pub checks: Vec<Check>,
    pub diagnostics: DiagnosticsReport,
}

impl Report for SimulationReport {
    fn checks(&self) -> &[Check] {
        &self.checks
    }

    fn diagnostics(&self) -> &DiagnosticsReport {
        &self.diagnostics
    }

    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        let stride = self.trajectory.len().div_ceil(SIMULATE_CSV_ROWS);
        self.trajectory.write_csv_every(w, true, stride)
    }
}

pub fn run_simulate(cfg: &ExperimentConfig) -> Result<SimulationReport> {
    cfg.validate()?;
    let loss = random_problem(cfg.samples, cfg.dim, cfg.seed)?;
    let stack0 = layers_for(cfg, cfg.init_scale.unwrap_or(1.0))?;
    let steps = (cfg.t_max / cfg.step).ceil() as usize + 1;
    let ctrl = StepController::fixed(cfg.step, cfg.t_max).with_max_snapshots(steps.clamp(5000, MAX_SIMULATE_SNAPSHOTS));
    let traj = integrate(&stack0, &loss, &ctrl)?;
    let mut checks = Vec::new();
    let mut diagnostics = DiagnosticsReport::default();

    let defect = conservation_defect(&traj);
    let mut s = Section::new("conservation", &["layer_j", "layer_k", "max_defect"]);
    for j in 0..defect.nrows() {
        for k in j + 1..defect.ncols() {
            s.row([(j + 1).to_string(), (k + 1).to_string(), fmt_g17(defect[(j, k)])]);
        }
    }
    diagnostics.push(s);
    checks.push(Check::at_most(
        "conservation defect",
        max_entry(&defect),
        CONSERVATION_TOL,
    ));

    let mut residuals = Section::new("mirror_residuals", &["kind", "residual"]);
    let general = mirror_residual_general(&traj)?;
    residuals.row(["general".to_string(), fmt_g17(general)]);
    checks.push(Check::at_most("general mirror residual", general, GENERAL_RESIDUAL_TOL));
    if cfg.layers == 2 {
        if let Ok(map) = DlnEntropy::from_stack(&stack0) {
            let closed = mirror_residual_closed_form(&traj, &MirrorMap::Dln(map))?;
            residuals.row(["closed_form".to_string(), fmt_g17(closed)]);
            checks.push(Check::at_most("closed-form mirror residual", closed, CLOSED_FORM_TOL));
        }
    }

    let idx = check_assumption_a(&stack0);
    checks.push(Check::holds("assumption (A)", idx.holds()));
    if idx.holds() {
        let census = sign_census(&traj, &idx);
        diagnostics.push(census_section(&census));
        checks.push(Check::holds("crossings only in minimal layers", census.verified()));
        checks.push(Check::at_most(
            "reconstruction error",
            reconstruction_error(&traj)?,
            RECONSTRUCTION_TOL,
        ));
        let bound = sigma_lower_bound(&stack0, &idx)?;
        let m_bad = m_bound_violations(&traj, &bound, M_BOUND_REL);
        checks.push(Check::at_most("M below sigma bound", m_bad as f64, 0.0));
        let rate = check_rate(&traj, bound.sigma, pl_constant(&loss)?);
        diagnostics.push(rate_section("rate_bound", &[("run".to_string(), &rate)]));
        checks.push(Check::at_most("rate bound violations", rate.violations as f64, 0.0));
    }
    diagnostics.push(residuals);

    let rises = traj
        .losses
        .windows(2)
        .filter(|w| w[1] > w[0] + 1e-12 * w[0].abs().max(1.0))
        .count();
    checks.push(Check::at_most("loss increases", rises as f64, 0.0));
    diagnostics.push(checks_section(&checks));
    Ok(SimulationReport {
        trajectory: traj,
        checks,
        diagnostics,
    })
}

/// Node trajectories of one coordinate plus the sign census.
#[derive(Clone, Debug)]
pub struct CrossingsReport {
    pub trajectory: Trajectory,
    pub coordinate: usize,
    pub census: SignCensus,
    pub checks: Vec<Check>,
    pub diagnostics: DiagnosticsReport,
}

impl Report for CrossingsReport {
    fn checks(&self) -> &[Check] {
        &self.checks
    }

    fn diagnostics(&self) -> &DiagnosticsReport {
        &self.diagnostics
    }

    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        let i = self.coordinate;
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.trajectory.num_layers()).map(|j| format!("u_{j}_{}", i + 1)));
        writeln!(w, "{}", header.join(","))?;
        for (t, state) in self.trajectory.times.iter().zip(&self.trajectory.states) {
            let mut row = vec![fmt_g17(*t)];
            row.extend((0..state.num_layers()).map(|j| fmt_g17(state.node(j, i))));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub fn run_crossings(cfg: &ExperimentConfig) -> Result<CrossingsReport> {
    cfg.validate()?;
    let loss = random_problem(cfg.samples, cfg.dim, cfg.seed)?;
    let stack0 = layers_for(cfg, cfg.init_scale.unwrap_or(1.0))?;
    let idx = check_assumption_a(&stack0);
    idx.require()?;
    let traj = integrate(&stack0, &loss, &StepController::fixed(cfg.step, cfg.t_max))?;
    let census = sign_census(&traj, &idx);
    let checks = vec![
        Check::holds("crossings only in minimal layers", census.verified()),
        Check::at_most("census violations", census.violations.len() as f64, 0.0),
    ];
    let mut diagnostics = DiagnosticsReport::default();
    diagnostics.push(census_section(&census));
    diagnostics.push(checks_section(&checks));
    Ok(CrossingsReport {
        trajectory: traj,
        coordinate: cfg.coordinate,
        census,
        checks,
        diagnostics,
    })
}

/// One init scale of the convergence experiment.
#[derive(Clone, Debug)]
pub struct ConvergenceRun {
    pub scale: f64,
    pub trajectory: Trajectory,
    pub rate: RateCheck,
    pub time_to_target: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ConvergenceReport {
    pub runs: Vec<ConvergenceRun>,
    /// True when several scales were run; the CSV then leads with a `scale` column.
    pub sweep: bool,
    pub checks: Vec<Check>,
    pub diagnostics: DiagnosticsReport,
}

impl Report for ConvergenceReport {
    fn checks(&self) -> &[Check] {
        &self.checks
    }

    fn diagnostics(&self) -> &DiagnosticsReport {
        &self.diagnostics
    }

    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        let lead = if self.sweep { "scale," } else { "" };
        writeln!(w, "{lead}t,loss_gap,log_loss_gap,bound")?;
        for run in &self.runs {
            let gaps = run.trajectory.gaps();
            let rate = 2.0 * run.rate.sigma * run.rate.mu;
            for (t, gap) in run.trajectory.times.iter().zip(&gaps) {
                let bound = (-rate * t).exp() * gaps[0];
                if self.sweep {
                    write!(w, "{},", fmt_g17(run.scale))?;
                }
                writeln!(
                    w,
                    "{},{},{},{}",
                    fmt_g17(*t),
                    fmt_g17(*gap),
                    fmt_g17(gap.ln()),
                    fmt_g17(bound)
                )?;
            }
        }
        Ok(())
    }
}

fn convergence_run(cfg: &ExperimentConfig, loss: &QuadraticLoss, mu: f64, scale: f64) -> Result<ConvergenceRun> {
    let stack0 = layers_for(cfg, scale)?;
    let idx = check_assumption_a(&stack0);
    let sigma = sigma_lower_bound(&stack0, &idx)?.sigma;
    let ctrl = StepController::adaptive(cfg.t_max).with_stop_gap(CONVERGENCE_STOP_GAP);
    let trajectory = integrate(&stack0, loss, &ctrl)?;
    let rate = check_rate(&trajectory, sigma, mu);
    let time_to_target = time_to_gap(&trajectory, TARGET_GAP);
    Ok(ConvergenceRun {
        scale,
        trajectory,
        rate,
        time_to_target,
    })
}

/// Rate-bound run at `cfg.init_scale`, or the three-scale sweep when no scale is set.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let loss = random_problem(cfg.samples, cfg.dim, cfg.seed)?;
    let mu = pl_constant(&loss)?;
    let scales: Vec<f64> = match cfg.init_scale {
        Some(s) => vec![s],
        None => FIG3_SCALES.to_vec(),
    };
    let runs = thread::scope(|scope| {
        let handles: Vec<_> = scales
            .iter()
            .map(|&s| {
                let loss = &loss;
                scope.spawn(move || convergence_run(cfg, loss, mu, s))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("convergence worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut checks = Vec::new();
    for run in &runs {
        checks.push(Check::at_most(
            &format!("rate violations (scale {})", run.scale),
            run.rate.violations as f64,
            0.0,
        ));
        checks.push(Check::holds(
            &format!("gap {TARGET_GAP:e} reached (scale {})", run.scale),
            run.time_to_target.is_some(),
        ));
    }
    let sweep = runs.len() > 1;
    if sweep {
        let sigma_up = runs.windows(2).all(|w| w[1].rate.sigma > w[0].rate.sigma);
        let faster = runs
            .windows(2)
            .all(|w| match (w[0].time_to_target, w[1].time_to_target) {
                (Some(a), Some(b)) => b < a,
                _ => false,
            });
        checks.push(Check::holds("sigma increases with scale", sigma_up));
        checks.push(Check::holds("time to gap decreases with scale", faster));
    }

    let mut diagnostics = DiagnosticsReport::default();
    let labelled: Vec<(String, &RateCheck)> = runs.iter().map(|r| (fmt_g17(r.scale), &r.rate)).collect();
    diagnostics.push(rate_section("rate_bound", &labelled));
    let mut timing = Section::new("time_to_gap", &["scale", "target", "time", "final_time", "steps"]);
    for r in &runs {
        timing.row([
            fmt_g17(r.scale),
            fmt_g17(TARGET_GAP),
            r.time_to_target.map(fmt_g17).unwrap_or_default(),
            fmt_g17(r.trajectory.final_time()),
            r.trajectory.steps.to_string(),
        ]);
    }
    diagnostics.push(timing);
    diagnostics.push(checks_section(&checks));
    Ok(ConvergenceReport {
        runs,
        sweep,
        checks,
        diagnostics,
    })
}

/// Flow limit against the KKT solution for one init scale.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasRow {
    pub alpha: f64,
    pub theta_flow: Vec<f64>,
    pub theta_kkt: Vec<f64>,
    pub l1_norm: f64,
    pub l1_min: f64,
    pub linf_mismatch: f64,
    /// `||theta_flow - theta_L2|| / ||theta_L2||` with `theta_L2` the min-norm interpolator.
    pub l2_distance: f64,
    pub newton_iterations: usize,
    pub flow_time: f64,
}

impl BiasRow {
    pub fn l1_excess(&self) -> f64 {
        (self.l1_norm - self.l1_min) / self.l1_min
    }
}

#[derive(Clone, Debug)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
    pub checks: Vec<Check>,
    pub diagnostics: DiagnosticsReport,
}

impl BiasReport {
    pub fn row(&self, alpha: f64) -> Option<&BiasRow> {
        self.rows.iter().find(|r| r.alpha == alpha)
    }
}

impl Report for BiasReport {
    fn checks(&self) -> &[Check] {
        &self.checks
    }

    fn diagnostics(&self) -> &DiagnosticsReport {
        &self.diagnostics
    }

    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "alpha,l1_norm,l1_min,linf_mismatch")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{}",
                fmt_g17(r.alpha),
                fmt_g17(r.l1_norm),
                fmt_g17(r.l1_min),
                fmt_g17(r.linf_mismatch)
            )?;
        }
        Ok(())
    }
}

fn bias_row(loss: &QuadraticLoss, alpha: f64, num_layers: usize, t_max: f64, l1_min: f64) -> Result<BiasRow> {
    let d = loss.x().ncols();
    let ctrl = StepController::adaptive(t_max).with_stop_gap(BIAS_STOP_GAP);
    let (traj, map) = if num_layers == 2 {
        let (u0, v0) = (vec![alpha; d], vec![0.0; d]);
        let stack0 = LayerStack::new(vec![u0.clone(), v0.clone()])?;
        (
            integrate(&stack0, loss, &ctrl)?,
            MirrorMap::Dln(DlnEntropy::new(&u0, &v0)?),
        )
    } else {
        let u0 = vec![alpha; d];
        (
            integrate_redundant(&u0, num_layers, loss, &ctrl)?,
            MirrorMap::Redundant(RedundantEntropy::new(&u0, num_layers)?),
        )
    };
    let gap = *traj.gaps().last().expect("trajectory is never empty");
    if gap > BIAS_STOP_GAP {
        return Err(Error::FlowNotConverged {
            t: traj.final_time(),
            gap,
        });
    }
    let kkt = solve_kkt_bias(loss, &map, KKT_TOL)?;
    let theta_flow: Vec<f64> = traj.final_theta().to_vec();
    let linf_mismatch = theta_flow
        .iter()
        .zip(&kkt.theta_star)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let l2 = loss.min_norm_solution();
    let l2_distance = theta_flow
        .iter()
        .zip(l2.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
        / l2.norm();
    Ok(BiasRow {
        alpha,
        l1_norm: theta_flow.iter().map(|v| v.abs()).sum(),
        l1_min,
        linf_mismatch,
        l2_distance,
        theta_flow,
        theta_kkt: kkt.theta_star,
        newton_iterations: kkt.iterations,
        flow_time: traj.final_time(),
    })
}

/// Two layers: the `BIAS_ALPHAS` sweep with `u(0) = alpha`, `v(0) = 0` on a
/// planted sparse problem. Three or more layers: the redundant network from
/// `u(0) = alpha` (default 1) on a positive problem.
pub fn run_bias(cfg: &ExperimentConfig) -> Result<BiasReport> {
    cfg.validate()?;
    if cfg.samples >= cfg.dim {
        return Err(Error::Config("bias experiment needs --samples < --dim".into()));
    }
    let loss = if cfg.layers == 2 {
        sparse_interpolation_problem(cfg.samples, cfg.dim, BIAS_SPARSITY.min(cfg.dim), cfg.seed)?
    } else {
        positive_interpolation_problem(cfg.samples, cfg.dim, cfg.seed)?
    };
    let l1_min = min_l1_norm(&loss)?.0;
    let alphas: Vec<f64> = match (cfg.layers, cfg.init_scale) {
        (_, Some(a)) => vec![a],
        (2, None) => BIAS_ALPHAS.to_vec(),
        (_, None) => vec![1.0],
    };
    let rows = thread::scope(|scope| {
        let handles: Vec<_> = alphas
            .iter()
            .map(|&a| {
                let loss = &loss;
                scope.spawn(move || bias_row(loss, a, cfg.layers, cfg.t_max, l1_min))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bias worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut checks = Vec::new();
    for r in &rows {
        checks.push(Check::at_most(
            &format!("flow vs KKT mismatch (alpha {})", r.alpha),
            r.linf_mismatch,
            MISMATCH_TOL,
        ));
    }
    if cfg.layers == 2 && cfg.init_scale.is_none() {
        let by = |a: f64| rows.iter().find(|r| r.alpha == a).expect("alpha in sweep");
        checks.push(Check::at_most(
            "L1 excess at alpha 0.01",
            by(0.01).l1_excess(),
            SWEEP_TOL,
        ));
        checks.push(Check::at_most(
            "L2 distance at alpha 10",
            by(10.0).l2_distance,
            SWEEP_TOL,
        ));
        let shrinking = [1.0, 0.1, 0.01]
            .windows(2)
            .all(|w| by(w[1]).l1_excess() <= by(w[0]).l1_excess() + 1e-9);
        checks.push(Check::holds("L1 excess decreases with alpha", shrinking));
    }

    let mut diagnostics = DiagnosticsReport::default();
    let mut s = Section::new(
        "bias",
        &["alpha", "l1_excess", "l2_distance", "newton_iterations", "flow_time"],
    );
    for r in &rows {
        s.row([
            fmt_g17(r.alpha),
            fmt_g17(r.l1_excess()),
            fmt_g17(r.l2_distance),
            r.newton_iterations.to_string(),
            fmt_g17(r.flow_time),
        ]);
    }
    diagnostics.push(s);
    diagnostics.push(checks_section(&checks));
    Ok(BiasReport {
        rows,
        checks,
        diagnostics,
    })
}

/// Certification table of the parameterization.
#[derive(Clone, Debug)]
pub struct ParamcheckReport {
    pub checks: Vec<Check>,
    pub diagnostics: DiagnosticsReport,
}

impl Report for ParamcheckReport {
    fn checks(&self) -> &[Check] {
        &self.checks
    }

    fn diagnostics(&self) -> &DiagnosticsReport {
        &self.diagnostics
    }

    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "claim,passed,worst")?;
        for c in &self.checks {
            writeln!(w, "{},{},{}", c.name, c.passed, fmt_g17(c.value))?;
        }
        Ok(())
    }
}

pub fn run_paramcheck(cfg: &ExperimentConfig) -> Result<ParamcheckReport> {
    cfg.validate()?;
    let checks: Vec<Check> = certify(cfg.layers, cfg.dim, cfg.samples, cfg.seed)?
        .into_iter()
        .map(|c| Check {
            name: c.claim.to_string(),
            value: c.worst,
            threshold: None,
            passed: c.passed,
        })
        .collect();
    let mut diagnostics = DiagnosticsReport::default();
    diagnostics.push(checks_section(&checks));
    Ok(ParamcheckReport { checks, diagnostics })
}

/// Runs whichever experiment `cfg` names.
pub fn run(cfg: &ExperimentConfig) -> Result<Box<dyn Report>> {
    Ok(match cfg.experiment {
        Experiment::Simulate => Box::new(run_simulate(cfg)?),
        Experiment::Crossings => Box::new(run_crossings(cfg)?),
        Experiment::Convergence => Box::new(run_convergence(cfg)?),
        Experiment::Bias => Box::new(run_bias(cfg)?),
        Experiment::Paramcheck => Box::new(run_paramcheck(cfg)?),
    })
}
