//! Period sequences: synthetic logistic populations and CSV ingestion.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::types::{NoiseSpec, ObsId, Observation, Period};

/// How many observations each period may sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetRule {
    /// `max(1, round(fraction * N))`.
    Fraction(f64),
    Size(usize),
}

impl BudgetRule {
    pub fn resolve(&self, n: usize) -> Result<usize> {
        let k = match *self {
            BudgetRule::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::invalid(format!("budget fraction {f} outside (0, 1]")));
                }
                ((f * n as f64).round() as usize).max(1)
            }
            BudgetRule::Size(k) => k,
        };
        if k < 1 || k > n {
            return Err(Error::invalid(format!("budget {k} outside [1, {n}]")));
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    /// Fresh contexts every period, fixed weights.
    #[default]
    Random,
    /// Weights rotate by `drift_angle` radians per period in the plane of the
    /// first two coordinates. No effect when `dim == 1`.
    TemporalDrift,
}

/// Synthetic population: contexts uniform on `[-1, 1]^dim`, mean reward
/// `logistic(intercept + w . x)` with `w` standard normal scaled by
/// `weight_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub dim: usize,
    pub periods: usize,
    pub per_period: usize,
    pub weight_seed: u64,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub grouping: Grouping,
    #[serde(default = "default_drift")]
    pub drift_angle: f64,
    #[serde(default = "default_scale")]
    pub weight_scale: f64,
    #[serde(default)]
    pub intercept: f64,
}

fn default_drift() -> f64 {
    0.3
}

fn default_scale() -> f64 {
    1.0
}

impl SynthSpec {
    pub fn new(dim: usize, periods: usize, per_period: usize, weight_seed: u64) -> Self {
        Self {
            dim,
            periods,
            per_period,
            weight_seed,
            noise: NoiseSpec::None,
            grouping: Grouping::Random,
            drift_angle: default_drift(),
            weight_scale: default_scale(),
            intercept: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 {
            return Err(Error::invalid("synthetic: dim must be >= 1"));
        }
        if self.per_period < 2 {
            return Err(Error::invalid("synthetic: per_period must be >= 2"));
        }
        if self.periods < 1 {
            return Err(Error::invalid("synthetic: periods must be >= 1"));
        }
        for (name, v) in [
            ("drift_angle", self.drift_angle),
            ("weight_scale", self.weight_scale),
            ("intercept", self.intercept),
        ] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("synthetic: {name} must be finite")));
            }
        }
        Ok(())
    }

    /// Generating weights for period `t`.
    pub fn weights(&self, t: usize) -> Vec<f64> {
        let mut stream = rng::rng_from(rng::derive_seed(self.weight_seed, &[rng::tag("weights")]));
        let mut w: Vec<f64> = (0..self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut stream);
                self.weight_scale * z
            })
            .collect();
        if self.grouping == Grouping::TemporalDrift && self.dim >= 2 {
            let (s, c) = (self.drift_angle * t as f64).sin_cos();
            let (a, b) = (w[0], w[1]);
            w[0] = c * a - s * b;
            w[1] = s * a + c * b;
        }
        w
    }

    pub fn mean_reward(&self, w: &[f64], x: &[f64]) -> f64 {
        logistic(self.intercept + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
    }
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Generates `spec.periods` periods. Ids are unique across periods.
pub fn synth_generate(spec: &SynthSpec, budget: BudgetRule) -> Result<Vec<Period>> {
    spec.validate()?;
    let k = budget.resolve(spec.per_period)?;
    (0..spec.periods)
        .map(|t| {
            let w = spec.weights(t);
            let mut stream = rng::rng_from(rng::derive_seed(
                spec.weight_seed,
                &[rng::tag("contexts"), t as u64],
            ));
            let observations = (0..spec.per_period)
                .map(|i| {
                    let x: Vec<f64> = (0..spec.dim).map(|_| stream.random_range(-1.0..=1.0)).collect();
                    let mean = spec.mean_reward(&w, &x);
                    let id = ObsId((t * spec.per_period + i) as u64);
                    Observation::new(id, x, mean, spec.noise)
                })
                .collect::<Result<Vec<_>>>()?;
            Period::new(t, observations, k)
        })
        .collect()
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub reward: String,
    /// When absent, rows are split at random into `periods` groups.
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

struct Row {
    features: Vec<f64>,
    reward: f64,
    label: Option<String>,
}

fn csv_err(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Csv {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Reads a comma-separated file with a header row.
///
/// Empty feature cells become 0. With `normalize`, rewards are min-max scaled
/// to `[0, 1]` (a constant column maps to 0); otherwise they must already lie
/// in `[0, 1]`. Labeled periods are ordered numerically when every label is a
/// number, else by first appearance. Row numbers in errors count the header as
/// row 1. Observation ids are zero-based data row indices.
pub fn csv_ingest(path: &Path, schema: &CsvSchema, budget: BudgetRule) -> Result<Vec<Period>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_err(1, "", e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| csv_err(1, name, "column not found in header"))
    };
    let feature_cols = schema
        .features
        .iter()
        .map(|f| column(f))
        .collect::<Result<Vec<_>>>()?;
    let reward_col = column(&schema.reward)?;
    let period_col = schema.period.as_deref().map(column).transpose()?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| csv_err(line, "", e.to_string()))?;
        let features = feature_cols
            .iter()
            .zip(&schema.features)
            .map(|(&c, name)| {
                let cell = record.get(c).unwrap_or("").trim();
                if cell.is_empty() {
                    Ok(0.0)
                } else {
                    cell.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| csv_err(line, name, format!("not a number: {cell:?}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let cell = record.get(reward_col).unwrap_or("").trim();
        let reward = cell
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| csv_err(line, &schema.reward, format!("reward is not numeric: {cell:?}")))?;
        let label = period_col.map(|c| record.get(c).unwrap_or("").trim().to_string());
        rows.push(Row {
            features,
            reward,
            label,
        });
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("{}: no data rows", path.display())));
    }

    if schema.normalize {
        let lo = rows.iter().map(|r| r.reward).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r.reward).fold(f64::NEG_INFINITY, f64::max);
        for r in &mut rows {
            r.reward = if hi > lo { (r.reward - lo) / (hi - lo) } else { 0.0 };
        }
    } else if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| !(0.0..=1.0).contains(&r.reward)) {
        return Err(csv_err(
            i + 2,
            &schema.reward,
            format!("reward {} outside [0, 1] and normalize is off", r.reward),
        ));
    }

    let groups = match period_col {
        Some(_) => group_by_label(&rows),
        None => random_partition(rows.len(), schema.periods, schema.partition_seed)?,
    };
    groups
        .into_iter()
        .enumerate()
        .map(|(t, members)| {
            let observations = members
                .iter()
                .map(|&i| {
                    let r = &rows[i];
                    Observation::new(ObsId(i as u64), r.features.clone(), r.reward, NoiseSpec::None)
                })
                .collect::<Result<Vec<_>>>()?;
            let k = budget.resolve(observations.len())?;
            Period::new(t, observations, k)
        })
        .collect()
}

fn group_by_label(rows: &[Row]) -> Vec<Vec<usize>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, r) in rows.iter().enumerate() {
        let label = r.label.clone().unwrap_or_default();
        if !groups.contains_key(&label) {
            order.push(label.clone());
        }
        groups.entry(label).or_default().push(i);
    }
    let numeric: Option<Vec<f64>> = order.iter().map(|l| l.parse::<f64>().ok()).collect();
    if let Some(keys) = numeric {
        let mut idx: Vec<usize> = (0..order.len()).collect();
        idx.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
        order = idx.into_iter().map(|i| order[i].clone()).collect();
    }
    order
        .into_iter()
        .map(|l| groups.remove(&l).expect("label recorded"))
        .collect()
}

/// Seeded split of `0..n` into `t` groups whose sizes differ by at most one.
/// Each group keeps ascending row order.
pub fn random_partition(n: usize, t: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if t < 1 || t > n {
        return Err(Error::invalid(format!("cannot split {n} rows into {t} periods")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng_from(rng::derive_seed(seed, &[rng::tag("partition")])));
    let (base, extra) = (n / t, n % t);
    let mut groups = Vec::with_capacity(t);
    let mut start = 0;
    for g in 0..t {
        let len = base + usize::from(g < extra);
        let mut chunk = idx[start..start + len].to_vec();
        chunk.sort_unstable();
        groups.push(chunk);
        start += len;
    }
    Ok(groups)
}
