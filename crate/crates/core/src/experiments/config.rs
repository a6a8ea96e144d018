use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::InitScheme;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Simulate,
    Crossings,
    Convergence,
    Bias,
    Paramcheck,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Simulate,
        Experiment::Crossings,
        Experiment::Convergence,
        Experiment::Bias,
        Experiment::Paramcheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Crossings => "crossings",
            Experiment::Convergence => "convergence",
            Experiment::Bias => "bias",
            Experiment::Paramcheck => "paramcheck",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// How the initial layers are drawn; the scale is supplied separately.
#[derive(Clone, Debug, PartialEq)]
pub enum InitChoice {
    Uniform,
    Fig3,
    Positive,
    Explicit(Vec<Vec<f64>>),
}

impl InitChoice {
    pub fn scheme(&self, scale: f64) -> InitScheme {
        match self {
            InitChoice::Uniform => InitScheme::Uniform { scale },
            InitChoice::Fig3 => InitScheme::ZeroFirstLayer { scale },
            InitChoice::Positive => InitScheme::Positive { scale },
            InitChoice::Explicit(values) => InitScheme::Explicit(values.clone()),
        }
    }

    /// Parses `uniform`, `fig3` or `positive`; explicit values come from a file.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "uniform" => Ok(InitChoice::Uniform),
            "fig3" => Ok(InitChoice::Fig3),
            "positive" => Ok(InitChoice::Positive),
            other => Err(Error::Config(format!(
                "unknown init scheme `{other}` (expected uniform, fig3, positive)"
            ))),
        }
    }

    /// Reads one layer per non-empty line, values separated by commas or whitespace.
    pub fn parse_explicit(text: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let layer = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::Config(format!("line {}: bad number `{t}`", n + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            layers.push(layer);
        }
        if layers.is_empty() {
            return Err(Error::Config("init file holds no layers".into()));
        }
        Ok(InitChoice::Explicit(layers))
    }
}

/// Everything one CLI invocation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// `n`, rows of `X` (sample count for `paramcheck`).
    pub samples: usize,
    pub dim: usize,
    pub layers: usize,
    pub seed: u64,
    pub t_max: f64,
    pub step: f64,
    pub init: InitChoice,
    /// `None` lets the experiment pick (the convergence experiment then sweeps).
    pub init_scale: Option<f64>,
    /// 0-based coordinate tracked by the crossings experiment.
    pub coordinate: usize,
    pub output_path: Option<PathBuf>,
    pub diagnostics_path: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults mirroring the reference experiments.
    pub fn defaults(experiment: Experiment) -> Self {
        let base = Self {
            experiment,
            samples: 10,
            dim: 5,
            layers: 3,
            seed: 0,
            t_max: 10.0,
            step: 1e-3,
            init: InitChoice::Uniform,
            init_scale: None,
            coordinate: 0,
            output_path: None,
            diagnostics_path: None,
        };
        match experiment {
            Experiment::Simulate => Self {
                t_max: 5.0,
                step: 1e-4,
                ..base
            },
            Experiment::Crossings => Self { layers: 4, ..base },
            Experiment::Convergence => Self {
                layers: 6,
                dim: 8,
                t_max: 500.0,
                init: InitChoice::Fig3,
                ..base
            },
            Experiment::Bias => Self {
                layers: 2,
                samples: 3,
                dim: 6,
                t_max: 1e4,
                ..base
            },
            Experiment::Paramcheck => Self {
                layers: 4,
                dim: 4,
                samples: 100,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers < 2 {
            return bad("--layers must be at least 2");
        }
        if self.dim == 0 || self.samples == 0 {
            return bad("--dim and --samples must be at least 1");
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return bad("--tmax must be positive");
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad("--step must be positive");
        }
        if let Some(s) = self.init_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad("--init-scale must be positive");
            }
        }
        if self.coordinate >= self.dim {
            return bad("--coordinate must be below --dim");
        }
        Ok(())
    }
}

/// Parses line-oriented `key = value` text; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values() {
        let kv = parse_key_values("# comment\nlayers = 4\n\n seed=7 # trailing\n").unwrap();
        assert_eq!(kv, vec![("layers".into(), "4".into()), ("seed".into(), "7".into())]);
        assert!(parse_key_values("layers 4").is_err());
        assert!(parse_key_values(" = 4").is_err());
    }

    #[test]
    fn explicit_init_file() {
        let init = InitChoice::parse_explicit("1, 2, 3\n# skip\n4 5 6\n").unwrap();
        assert_eq!(
            init,
            InitChoice::Explicit(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]])
        );
        assert!(InitChoice::parse_explicit("1, x").is_err());
        assert!(InitChoice::parse_explicit("\n").is_err());
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("train".parse::<Experiment>().is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = ExperimentConfig::defaults(Experiment::Simulate);
        assert!(cfg.validate().is_ok());
        cfg.layers = 1;
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            coordinate: 9,
            ..ExperimentConfig::defaults(Experiment::Crossings)
        };
        assert!(cfg.validate().is_err());
    }
}
