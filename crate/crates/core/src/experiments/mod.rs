//! Problem generation and the experiment runners behind the CLI.

mod config;
mod kkt;
mod pl;
mod runs;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{seeded_rng, QuadraticLoss};

pub use config::{parse_key_values, Experiment, ExperimentConfig, InitChoice};
pub use kkt::{min_l1_norm, solve_kkt_bias, KktSolution, NEWTON_MAX_ITERATIONS};
pub use pl::{check_rate, pl_constant, time_to_gap, RateCheck, RATE_SLACK_ABS, RATE_SLACK_REL};
pub use runs::{
    run, run_bias, run_convergence, run_crossings, run_paramcheck, run_simulate, BiasReport, BiasRow, Check,
    ConvergenceReport, ConvergenceRun, CrossingsReport, ParamcheckReport, Report, SimulationReport, BIAS_ALPHAS,
    FIG3_SCALES,
};

pub(crate) const PROBLEM_STREAM: u64 = 0;

/// `X` and `y` with entries uniform in `[-1, 1]`.
pub fn random_problem(samples: usize, dim: usize, seed: u64) -> Result<QuadraticLoss> {
    check_sizes(samples, dim)?;
    let mut rng = seeded_rng(seed, PROBLEM_STREAM);
    let x = DMatrix::from_fn(samples, dim, |_, _| rng.random_range(-1.0..=1.0));
    let y = DVector::from_fn(samples, |_, _| rng.random_range(-1.0..=1.0));
    QuadraticLoss::new(x, y)
}

/// `X` uniform in `[-1, 1]` and `y = X theta` for a planted `theta` with
/// `sparsity` nonzero entries uniform in `[-1, 1]`.
pub fn sparse_interpolation_problem(samples: usize, dim: usize, sparsity: usize, seed: u64) -> Result<QuadraticLoss> {
    check_sizes(samples, dim)?;
    if sparsity == 0 || sparsity > dim {
        return Err(Error::Config(format!("sparsity must be in 1..={dim}")));
    }
    let mut rng = seeded_rng(seed, PROBLEM_STREAM);
    let x = DMatrix::from_fn(samples, dim, |_, _| rng.random_range(-1.0..=1.0));
    let mut planted = DVector::zeros(dim);
    let mut support: Vec<usize> = (0..dim).collect();
    for k in 0..sparsity {
        let pick = rng.random_range(k..dim);
        support.swap(k, pick);
        planted[support[k]] = rng.random_range(-1.0..=1.0);
    }
    let y = &x * planted;
    QuadraticLoss::new(x, y)
}

/// `X` and a planted `theta` with entries in `(0, 1]`, `y = X theta`.
pub fn positive_interpolation_problem(samples: usize, dim: usize, seed: u64) -> Result<QuadraticLoss> {
    check_sizes(samples, dim)?;
    let mut rng = seeded_rng(seed, PROBLEM_STREAM);
    let x = DMatrix::from_fn(samples, dim, |_, _| 1.0 - rng.random::<f64>());
    let planted = DVector::from_fn(dim, |_, _| 1.0 - rng.random::<f64>());
    let y = &x * planted;
    QuadraticLoss::new(x, y)
}

fn check_sizes(samples: usize, dim: usize) -> Result<()> {
    if samples == 0 || dim == 0 {
        return Err(Error::Config("problem sizes must be at least 1".into()));
    }
    Ok(())
}
