//! Reward models fitted on every row selected so far.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::types::{IdMap, Observation};

/// Lower clamp applied to predictions so every strategy sees positive values.
pub const PREDICTION_FLOOR: f64 = 1e-6;

/// Accumulated `(context, realized reward)` rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    contexts: Vec<Vec<f64>>,
    rewards: Vec<f64>,
}

impl TrainingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, context: Vec<f64>, reward: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&reward) {
            return Err(Error::invalid(format!("training reward {reward} outside [0, 1]")));
        }
        if let Some(d) = self.dim() {
            if context.len() != d {
                return Err(Error::invalid(format!(
                    "training context has dimension {}, expected {d}",
                    context.len()
                )));
            }
        }
        self.contexts.push(context);
        self.rewards.push(reward);
        Ok(())
    }

    /// Appends the selected observations with their realized rewards.
    pub fn extend_from(&mut self, observations: &[Observation], realized: &IdMap) -> Result<()> {
        for obs in observations {
            if let Some(&r) = realized.get(&obs.id) {
                self.push(obs.context.clone(), r)?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.contexts.first().map(Vec::len)
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }
}

/// Model family and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    Ridge {
        #[serde(default = "default_penalty")]
        penalty: f64,
    },
    Knn {
        #[serde(default = "default_k")]
        k: usize,
    },
    /// True mean plus Gaussian noise keyed by observation id.
    NoisyOracle {
        #[serde(default)]
        sigma: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_penalty() -> f64 {
    1e-3
}

fn default_k() -> usize {
    5
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Ridge {
            penalty: default_penalty(),
        }
    }
}

/// A fitted predictor. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardModel {
    Ridge { intercept: f64, weights: Vec<f64> },
    Knn { k: usize, data: TrainingSet },
    NoisyOracle { sigma: f64, seed: u64 },
}

/// Fits `spec` on `data`. Deterministic in its inputs.
pub fn fit(spec: &ModelSpec, data: &TrainingSet) -> Result<RewardModel> {
    match *spec {
        ModelSpec::Ridge { penalty } => fit_ridge(data, penalty),
        ModelSpec::Knn { k } => {
            if k == 0 {
                return Err(Error::invalid("knn: k must be >= 1"));
            }
            if data.len() < k {
                return Err(Error::invalid(format!("knn: {} rows, need at least {k}", data.len())));
            }
            Ok(RewardModel::Knn {
                k,
                data: data.clone(),
            })
        }
        ModelSpec::NoisyOracle { sigma, seed } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::invalid(format!("noisy-oracle: sigma {sigma} must be >= 0")));
            }
            Ok(RewardModel::NoisyOracle { sigma, seed })
        }
    }
}

fn fit_ridge(data: &TrainingSet, penalty: f64) -> Result<RewardModel> {
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(Error::invalid(format!("ridge: penalty {penalty} must be >= 0")));
    }
    let d = data
        .dim()
        .ok_or_else(|| Error::invalid("ridge: no training rows"))?;
    let n = data.len();
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { data.contexts[i][j - 1] });
    let y = DVector::from_column_slice(&data.rewards);
    let mut gram = x.transpose() * &x;
    // Intercept is not penalized.
    for j in 1..=d {
        gram[(j, j)] += penalty;
    }
    let rhs = x.transpose() * y;
    let beta = match gram.clone().lu().solve(&rhs) {
        Some(b) if b.iter().all(|v| v.is_finite()) => b,
        _ => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::NoConvergence(format!("ridge: {e}")))?,
    };
    Ok(RewardModel::Ridge {
        intercept: beta[0],
        weights: beta.iter().skip(1).copied().collect(),
    })
}

impl RewardModel {
    fn dim(&self) -> Option<usize> {
        match self {
            RewardModel::Ridge { weights, .. } => Some(weights.len()),
            RewardModel::Knn { data, .. } => data.dim(),
            RewardModel::NoisyOracle { .. } => None,
        }
    }

    /// Unclamped predictions.
    pub fn predict_raw(&self, observations: &[Observation]) -> Result<IdMap> {
        if let Some(d) = self.dim() {
            if let Some(obs) = observations.iter().find(|o| o.context.len() != d) {
                return Err(Error::invalid(format!(
                    "observation {} has dimension {}, model expects {d}",
                    obs.id,
                    obs.context.len()
                )));
            }
        }
        Ok(observations
            .iter()
            .map(|obs| (obs.id, self.predict_one(obs)))
            .collect())
    }

    fn predict_one(&self, obs: &Observation) -> f64 {
        match self {
            RewardModel::Ridge { intercept, weights } => {
                intercept + weights.iter().zip(&obs.context).map(|(w, x)| w * x).sum::<f64>()
            }
            RewardModel::Knn { k, data } => knn_mean(data, *k, &obs.context),
            RewardModel::NoisyOracle { sigma, seed } => {
                if *sigma == 0.0 {
                    return obs.mean_reward;
                }
                let mut stream = rng::keyed_rng(*seed, obs.id.0);
                let noise = Normal::new(0.0, *sigma).expect("sigma validated");
                obs.mean_reward + noise.sample(&mut stream)
            }
        }
    }
}

/// Mean reward of the `k` nearest rows; equal distances keep training order.
fn knn_mean(data: &TrainingSet, k: usize, query: &[f64]) -> f64 {
    let mut dist: Vec<(f64, usize)> = data
        .contexts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let d2: f64 = c.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2, i)
        })
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dist[..k].iter().map(|&(_, i)| data.rewards[i]).sum::<f64>() / k as f64
}

/// Predictions clamped to `[floor, 1]`.
pub fn predict_clamped(model: &RewardModel, observations: &[Observation], floor: f64) -> Result<IdMap> {
    if !(floor > 0.0 && floor <= 1.0) {
        return Err(Error::invalid(format!("prediction floor {floor} outside (0, 1]")));
    }
    let mut raw = model.predict_raw(observations)?;
    raw.values_mut().for_each(|v| *v = clamp_prediction(*v, floor));
    Ok(raw)
}

pub fn clamp_prediction(raw: f64, floor: f64) -> f64 {
    if raw.is_nan() {
        floor
    } else {
        raw.clamp(floor, 1.0)
    }
}

/// Constant prediction used before any model can be fitted.
pub fn constant_predictions(observations: &[Observation], value: f64) -> IdMap {
    observations.iter().map(|o| (o.id, value)).collect()
}
