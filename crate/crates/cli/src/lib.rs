//! Command-line front end: `ddln <experiment> [flags]`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ddln_core::experiments::{parse_key_values, run as run_experiment, Check};
use ddln_core::{Experiment, ExperimentConfig, InitChoice, Report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "ddln",
    version,
    about = "Gradient-flow experiments on deep diagonal linear networks"
)]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the flow on a random problem and check every invariant
    Simulate(Flags),
    /// Node trajectories of one coordinate and the sign-change census
    Crossings(Flags),
    /// Linear-rate bound; sweeps init scales 1.0, 1.4, 1.8 unless --init-scale is set
    Convergence(Flags),
    /// Flow limit against the KKT solution and the minimal L1 / L2 interpolators
    Bias(Flags),
    /// Certify the commuting and regular parameterization numerically
    Paramcheck(Flags),
}

#[derive(Args, Debug, Clone)]
struct Flags {
    /// Number of layers L (at least 2)
    #[arg(long)]
    layers: Option<usize>,
    /// Dimension d of theta
    #[arg(long)]
    dim: Option<usize>,
    /// Rows n of X (random draws for paramcheck)
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Integration horizon
    #[arg(long)]
    tmax: Option<f64>,
    /// Fixed RK4 step size
    #[arg(long)]
    step: Option<f64>,
    /// uniform, fig3 or positive
    #[arg(long)]
    init_scheme: Option<String>,
    #[arg(long)]
    init_scale: Option<f64>,
    /// Explicit initial layers, one per line
    #[arg(long, conflicts_with = "init_scheme")]
    init_file: Option<PathBuf>,
    /// 1-based coordinate tracked by `crossings`
    #[arg(long)]
    coordinate: Option<usize>,
    /// Main CSV output
    #[arg(long)]
    output: Option<PathBuf>,
    /// Diagnostics CSV output
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    /// `key = value` file with defaults for any of these flags
    #[arg(long)]
    config: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Run(String),
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run(args: Vec<String>) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with(args: Vec<String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match parse(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let (experiment, flags) = match cli.command {
        Command::Simulate(f) => (Experiment::Simulate, f),
        Command::Crossings(f) => (Experiment::Crossings, f),
        Command::Convergence(f) => (Experiment::Convergence, f),
        Command::Bias(f) => (Experiment::Bias, f),
        Command::Paramcheck(f) => (Experiment::Paramcheck, f),
    };
    match execute(experiment, &flags, out) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Run(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_CHECK_FAILED
        }
    }
}

/// Parses once to find `--config`, then again with the file's entries placed
/// before the user's flags so that the flags win.
fn parse(args: &[String]) -> Result<Cli, clap::Error> {
    let first = Cli::try_parse_from(args)?;
    let flags = match &first.command {
        Command::Simulate(f)
        | Command::Crossings(f)
        | Command::Convergence(f)
        | Command::Bias(f)
        | Command::Paramcheck(f) => f,
    };
    let Some(path) = &flags.config else {
        return Ok(first);
    };
    let text = std::fs::read_to_string(path).map_err(|e| {
        clap::Error::raw(
            clap::error::ErrorKind::Io,
            format!("cannot read config {}: {e}\n", path.display()),
        )
    })?;
    let pairs = parse_key_values(&text)
        .map_err(|e| clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("{e}\n")))?;
    let sub = args
        .iter()
        .position(|a| Experiment::ALL.iter().any(|e| e.name() == a))
        .expect("subcommand parsed");
    let mut merged: Vec<String> = args[..=sub].to_vec();
    for (key, value) in pairs {
        let key = key.replace('_', "-");
        if key == "config" {
            continue;
        }
        merged.push(format!("--{key}"));
        merged.push(value);
    }
    merged.extend_from_slice(&args[sub + 1..]);
    Cli::try_parse_from(merged)
}

fn build_config(experiment: Experiment, f: &Flags) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::defaults(experiment);
    if let Some(v) = f.layers {
        cfg.layers = v;
    }
    if let Some(v) = f.dim {
        cfg.dim = v;
    }
    if let Some(v) = f.samples {
        cfg.samples = v;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if let Some(v) = f.tmax {
        cfg.t_max = v;
    }
    if let Some(v) = f.step {
        cfg.step = v;
    }
    if let Some(name) = &f.init_scheme {
        cfg.init = InitChoice::from_name(name).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(path) = &f.init_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
        cfg.init = InitChoice::parse_explicit(&text).map_err(|e| Failure::Usage(e.to_string()))?;
        if let InitChoice::Explicit(layers) = &cfg.init {
            cfg.layers = layers.len();
            cfg.dim = layers[0].len();
        }
    }
    cfg.init_scale = f.init_scale;
    if let Some(c) = f.coordinate {
        if c == 0 {
            return Err(Failure::Usage("--coordinate is 1-based".into()));
        }
        cfg.coordinate = c - 1;
    }
    cfg.output_path = f.output.clone();
    cfg.diagnostics_path = f.diagnostics.clone();
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn execute(experiment: Experiment, flags: &Flags, out: &mut dyn Write) -> Result<bool, Failure> {
    let cfg = build_config(experiment, flags)?;
    let report = run_experiment(&cfg).map_err(|e| Failure::Run(e.to_string()))?;
    if let Some(path) = &cfg.output_path {
        write_file(path, |w| report.write_csv(w))?;
    }
    if let Some(path) = &cfg.diagnostics_path {
        write_file(path, |w| report.diagnostics().write_csv(w))?;
    }
    print_summary(out, &cfg, report.as_ref()).map_err(|e| Failure::Run(e.to_string()))?;
    Ok(report.passed())
}

fn write_file<F>(path: &Path, body: F) -> Result<(), Failure>
where
    F: FnOnce(&mut dyn Write) -> ddln_core::Result<()>,
{
    let fail = |e: &dyn std::fmt::Display| Failure::Run(format!("writing {}: {e}", path.display()));
    let file = File::create(path).map_err(|e| fail(&e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).map_err(|e| fail(&e))?;
    w.flush().map_err(|e| fail(&e))
}

fn print_summary(out: &mut dyn Write, cfg: &ExperimentConfig, report: &dyn Report) -> std::io::Result<()> {
    writeln!(
        out,
        "{}: L={} d={} n={} seed={}",
        cfg.experiment, cfg.layers, cfg.dim, cfg.samples, cfg.seed
    )?;
    let width = report.checks().iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
    writeln!(out, "{:<width$}  {:>12}  {:>10}  result", "check", "value", "threshold")?;
    for Check {
        name,
        value,
        threshold,
        passed,
    } in report.checks()
    {
        let threshold = threshold.map(|t| format!("{t:.1e}")).unwrap_or_else(|| "-".into());
        let verdict = if *passed { "PASS" } else { "FAIL" };
        writeln!(out, "{name:<width$}  {value:>12.4e}  {threshold:>10}  {verdict}")?;
    }
    writeln!(out, "overall: {}", if report.passed() { "PASS" } else { "FAIL" })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        std::iter::once("ddln")
            .chain(s.split_whitespace())
            .map(String::from)
            .collect()
    }

    #[test]
    fn flags_fill_the_config() {
        let cli = parse(&argv("crossings --layers 5 --coordinate 2 --init-scale 0.5")).unwrap();
        let Command::Crossings(f) = cli.command else { panic!() };
        let cfg = build_config(Experiment::Crossings, &f).ok().unwrap();
        assert_eq!((cfg.layers, cfg.coordinate, cfg.init_scale), (5, 1, Some(0.5)));
        assert_eq!(cfg.dim, 5);
    }

    #[test]
    fn repeated_flags_take_the_last_value() {
        let cli = parse(&argv("simulate --seed 1 --seed 4")).unwrap();
        let Command::Simulate(f) = cli.command else { panic!() };
        assert_eq!(f.seed, Some(4));
    }

    #[test]
    fn unknown_scheme_is_a_usage_error() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        assert_eq!(
            run_with(argv("simulate --init-scheme gaussian"), &mut out, &mut err),
            EXIT_USAGE
        );
        assert_eq!(
            run_with(argv("simulate --coordinate 0"), &mut out, &mut err),
            EXIT_USAGE
        );
        assert_eq!(run_with(argv("train"), &mut out, &mut err), EXIT_USAGE);
    }

    #[test]
    fn help_exits_cleanly() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        assert_eq!(run_with(argv("--help"), &mut out, &mut err), EXIT_OK);
        assert!(String::from_utf8(out).unwrap().contains("convergence"));
    }
}
