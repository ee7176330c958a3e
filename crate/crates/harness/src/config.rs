//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! reps = 50
//! output_dir = "out"          # optional
//! prediction_floor = 1e-6     # optional
//!
//! [environment]
//! kind = "synthetic"          # or "csv"
//! dim = 5
//! periods = 4
//! per_period = 2000
//! weight_seed = 1
//!
//! [model]
//! kind = "ridge"              # ridge | knn | noisy-oracle
//!
//! [budget]
//! fraction = 0.05             # or: size = 100
//!
//! [[strategies]]
//! kind = "entropy"
//! betas = [0.1, 1.0]
//! ```
//!
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use popest::design::{AbsParams, Smoothing, Strategy};
use popest::env::{csv_ingest, synth_generate, BudgetRule, CsvSchema, SynthSpec};
use popest::model::{ModelSpec, PREDICTION_FLOOR};
use popest::Period;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const OUT_ENV: &str = "POPEST_OUT";
pub const DEFAULT_OUT: &str = "popest-out";

const MIN_FRACTION: f64 = 0.01;
const MAX_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub reps: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_floor")]
    pub prediction_floor: f64,
    pub environment: EnvConfig,
    #[serde(default)]
    pub model: ModelSpec,
    pub budget: BudgetRule,
    pub strategies: Vec<StrategyConfig>,
}

fn default_floor() -> f64 {
    PREDICTION_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvConfig {
    Synthetic(SynthSpec),
    Csv(CsvEnv),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvEnv {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    pub features: Vec<String>,
    pub reward: String,
    #[serde(default)]
    pub period: Option<String>,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default = "default_periods")]
    pub periods: usize,
    #[serde(default)]
    pub partition_seed: u64,
}

fn default_true() -> bool {
    true
}

fn default_periods() -> usize {
    8
}

/// One `[[strategies]]` entry; grids expand to one strategy per value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StrategyConfig {
    // Braced so `deny_unknown_fields` applies to them too.
    Srs {},
    Mps {},
    Entropy {
        betas: Vec<f64>,
    },
    Kl {
        betas: Vec<f64>,
    },
    AbsLogistic {
        alphas: Vec<f64>,
        #[serde(default = "default_clusters")]
        clusters: usize,
        #[serde(default = "default_greedy")]
        greedy_fraction: f64,
        #[serde(default)]
        trim: f64,
    },
    AbsExponential {
        alphas: Vec<f64>,
        #[serde(default = "default_clusters")]
        clusters: usize,
        #[serde(default = "default_greedy")]
        greedy_fraction: f64,
        #[serde(default)]
        trim: f64,
    },
}

fn default_clusters() -> usize {
    10
}

fn default_greedy() -> f64 {
    0.1
}

impl StrategyConfig {
    pub fn expand(&self) -> Vec<Strategy> {
        let abs = |smoothing, alphas: &[f64], clusters, greedy_fraction, trim| {
            alphas
                .iter()
                .map(|&alpha| {
                    Strategy::Abs(AbsParams {
                        smoothing,
                        alpha,
                        clusters,
                        greedy_fraction,
                        trim,
                    })
                })
                .collect()
        };
        match self {
            StrategyConfig::Srs {} => vec![Strategy::Srs],
            StrategyConfig::Mps {} => vec![Strategy::Mps],
            StrategyConfig::Entropy { betas } => betas.iter().map(|&beta| Strategy::Entropy { beta }).collect(),
            StrategyConfig::Kl { betas } => betas.iter().map(|&beta| Strategy::Kl { beta }).collect(),
            StrategyConfig::AbsLogistic {
                alphas,
                clusters,
                greedy_fraction,
                trim,
            } => abs(Smoothing::Logistic, alphas, *clusters, *greedy_fraction, *trim),
            StrategyConfig::AbsExponential {
                alphas,
                clusters,
                greedy_fraction,
                trim,
            } => abs(Smoothing::Exponential, alphas, *clusters, *greedy_fraction, *trim),
        }
    }

    fn grid(&self) -> Option<(&'static str, &[f64])> {
        match self {
            StrategyConfig::Srs {} | StrategyConfig::Mps {} => None,
            StrategyConfig::Entropy { betas } | StrategyConfig::Kl { betas } => Some(("betas", betas)),
            StrategyConfig::AbsLogistic { alphas, .. } | StrategyConfig::AbsExponential { alphas, .. } => {
                Some(("alphas", alphas))
            }
        }
    }
}

fn field_err(path: &str, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{path}: {msg}"))
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative CSV paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        if let EnvConfig::Csv(csv) = &mut cfg.environment {
            if csv.path.is_relative() {
                if let Some(dir) = path.parent() {
                    csv.path = dir.join(&csv.path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 1 {
            return Err(field_err("reps", "must be >= 1"));
        }
        if !(self.prediction_floor > 0.0 && self.prediction_floor <= 1.0) {
            return Err(field_err("prediction_floor", "must lie in (0, 1]"));
        }
        match self.budget {
            BudgetRule::Fraction(f) if !(MIN_FRACTION..=MAX_FRACTION).contains(&f) => {
                return Err(field_err(
                    "budget.fraction",
                    format!("{f} outside [{MIN_FRACTION}, {MAX_FRACTION}]"),
                ));
            }
            BudgetRule::Size(0) => return Err(field_err("budget.size", "must be >= 1")),
            _ => {}
        }
        match &self.environment {
            EnvConfig::Synthetic(spec) => spec
                .validate()
                .map_err(|e| field_err("environment", e))?,
            EnvConfig::Csv(csv) => {
                if csv.features.is_empty() {
                    return Err(field_err("environment.features", "must list at least one column"));
                }
                if csv.period.is_none() && csv.periods < 1 {
                    return Err(field_err("environment.periods", "must be >= 1"));
                }
            }
        }
        match self.model {
            ModelSpec::Ridge { penalty } if !(penalty >= 0.0 && penalty.is_finite()) => {
                return Err(field_err("model.penalty", "must be finite and >= 0"));
            }
            ModelSpec::Knn { k: 0 } => return Err(field_err("model.k", "must be >= 1")),
            ModelSpec::NoisyOracle { sigma, .. } if !(sigma >= 0.0 && sigma.is_finite()) => {
                return Err(field_err("model.sigma", "must be finite and >= 0"));
            }
            _ => {}
        }
        if self.strategies.is_empty() {
            return Err(field_err("strategies", "at least one strategy is required"));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if let Some((name, grid)) = s.grid() {
                if grid.is_empty() {
                    return Err(field_err(&format!("strategies[{i}].{name}"), "grid is empty"));
                }
            }
            for (j, strategy) in s.expand().iter().enumerate() {
                strategy.validate().map_err(|e| {
                    let name = s.grid().map_or("", |(n, _)| n);
                    field_err(&format!("strategies[{i}].{name}[{j}]"), e)
                })?;
            }
        }
        Ok(())
    }

    /// Every strategy variant in config order.
    pub fn variants(&self) -> Vec<Strategy> {
        self.strategies.iter().flat_map(StrategyConfig::expand).collect()
    }

    /// Output directory: explicit override, then the config, then the
    /// environment variable, then a fixed default.
    pub fn resolve_output(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn periods(&self) -> Result<Vec<Period>> {
        let periods = match &self.environment {
            EnvConfig::Synthetic(spec) => synth_generate(spec, self.budget)?,
            EnvConfig::Csv(csv) => {
                let schema = CsvSchema {
                    features: csv.features.clone(),
                    reward: csv.reward.clone(),
                    period: csv.period.clone(),
                    normalize: csv.normalize,
                    periods: csv.periods,
                    partition_seed: csv.partition_seed,
                };
                csv_ingest(&csv.path, &schema, self.budget)?
            }
        };
        Ok(periods)
    }
}
