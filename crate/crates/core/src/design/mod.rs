//! Target inclusion probabilities for every sampling strategy.
//!
//! Entropy and KL plans use the closed-form maximizers of the K = 1
//! regularized objectives (a softmax of `prediction / beta`, optionally
//! reweighted by the prediction itself), scaled to the budget and passed
//! through [`cap_and_renormalize`] so that no probability exceeds one.

mod abs;

pub use abs::{abs_plan, AbsParams, ClusterPlan, Smoothing};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{check_same_ids, IdMap, InclusionPlan, Period, StrategyTag};

/// Log-weights more than this far below the largest are raised to it, so
/// every weight stays a positive normal float after exponentiation.
const LOG_WEIGHT_FLOOR: f64 = 690.0;

/// A sampling strategy together with its trade-off parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    Srs,
    Mps,
    Entropy { beta: f64 },
    Kl { beta: f64 },
    Abs(AbsParams),
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Srs => "srs",
            Strategy::Mps => "mps",
            Strategy::Entropy { .. } => "entropy",
            Strategy::Kl { .. } => "kl",
            Strategy::Abs(p) => match p.smoothing {
                Smoothing::Logistic => "abs-logistic",
                Smoothing::Exponential => "abs-exponential",
            },
        }
    }

    /// The swept parameter: beta for entropy/KL, alpha for ABS.
    pub fn param(&self) -> Option<f64> {
        match self {
            Strategy::Srs | Strategy::Mps => None,
            Strategy::Entropy { beta } | Strategy::Kl { beta } => Some(*beta),
            Strategy::Abs(p) => Some(p.alpha),
        }
    }

    pub fn tag(&self) -> StrategyTag {
        StrategyTag::new(self.name(), self.param())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Strategy::Entropy { beta } | Strategy::Kl { beta } => check_beta(*beta),
            Strategy::Abs(p) => p.validate(),
            _ => Ok(()),
        }
    }

    /// Build this strategy's plan for `period`. ABS also returns its clusters.
    pub fn plan(
        &self,
        period: &Period,
        predictions: &IdMap,
        seed: u64,
    ) -> Result<(InclusionPlan, Option<ClusterPlan>)> {
        let k = period.budget();
        let plan = match self {
            Strategy::Srs => srs_plan(period),
            Strategy::Mps => mps_plan(predictions, k),
            Strategy::Entropy { beta } => entropy_plan(predictions, *beta, k),
            Strategy::Kl { beta } => kl_plan(predictions, *beta, k),
            Strategy::Abs(params) => {
                let (plan, clusters) = abs_plan(predictions, params, k, seed)?;
                return Ok((plan, Some(clusters)));
            }
        }?;
        Ok((plan, None))
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("beta must be finite and > 0, got {beta}")))
    }
}

fn check_finite(predictions: &IdMap) -> Result<()> {
    match predictions.iter().find(|(_, v)| !v.is_finite()) {
        Some((id, v)) => Err(Error::invalid(format!("prediction for {id} is {v}"))),
        None => Ok(()),
    }
}

fn check_positive(predictions: &IdMap) -> Result<()> {
    match predictions.iter().find(|(_, &v)| !(v > 0.0 && v.is_finite())) {
        Some((id, v)) => Err(Error::invalid(format!(
            "prediction for {id} is {v}; this strategy needs positive predictions"
        ))),
        None => Ok(()),
    }
}

/// Uniform plan: every observation included with probability K / N.
pub fn srs_plan(period: &Period) -> Result<InclusionPlan> {
    let n = period.len();
    let k = period.budget();
    let p = if k == n { 1.0 } else { k as f64 / n as f64 };
    let probs = period.ids().into_iter().map(|id| (id, p)).collect();
    InclusionPlan::new(probs, k, StrategyTag::new("srs", None))
}

/// Model-proportional sampling: probabilities proportional to predictions.
pub fn mps_plan(predictions: &IdMap, k: usize) -> Result<InclusionPlan> {
    check_positive(predictions)?;
    Ok(cap_and_renormalize(predictions, k)?.with_tag(StrategyTag::new("mps", None)))
}

/// Turn log-weights into positive weights relative to the largest.
fn weights_from_logs(logs: impl Iterator<Item = (crate::types::ObsId, f64)>) -> IdMap {
    let logs: IdMap = logs.collect();
    let top = logs.values().copied().fold(f64::NEG_INFINITY, f64::max);
    logs.into_iter()
        .map(|(id, l)| (id, (l - top).max(-LOG_WEIGHT_FLOOR).exp()))
        .collect()
}

/// Entropy sampling: K * softmax(prediction / beta), capped at one.
pub fn entropy_plan(predictions: &IdMap, beta: f64, k: usize) -> Result<InclusionPlan> {
    check_beta(beta)?;
    check_finite(predictions)?;
    let weights = weights_from_logs(predictions.iter().map(|(&id, &f)| (id, f / beta)));
    Ok(cap_and_renormalize(&weights, k)?.with_tag(StrategyTag::new("entropy", Some(beta))))
}

/// KL sampling: weights prediction * exp(prediction / beta), capped at one.
pub fn kl_plan(predictions: &IdMap, beta: f64, k: usize) -> Result<InclusionPlan> {
    check_beta(beta)?;
    check_positive(predictions)?;
    let weights = weights_from_logs(predictions.iter().map(|(&id, &f)| (id, f.ln() + f / beta)));
    Ok(cap_and_renormalize(&weights, k)?.with_tag(StrategyTag::new("kl", Some(beta))))
}

/// Scale nonnegative weights to sum to `k`, then repeatedly fix every id whose
/// scaled value exceeds one at probability one and spread the remaining
/// budget `k - |F|` over the rest in proportion to their weights.
pub fn cap_and_renormalize(raw: &IdMap, k: usize) -> Result<InclusionPlan> {
    let n = raw.len();
    if let Some((id, w)) = raw.iter().find(|(_, &w)| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid(format!("weight for {id} is {w}")));
    }
    let positive = raw.values().filter(|&&w| w > 0.0).count();
    if k == 0 || positive < k {
        return Err(Error::Infeasible(format!(
            "budget {k} needs at least that many positive weights, found {positive}"
        )));
    }
    if positive < n {
        return Err(Error::invalid(
            "zero weight would give a zero inclusion probability",
        ));
    }
    let weights: Vec<f64> = raw.values().copied().collect();
    let mut forced = vec![false; n];
    let mut n_forced = 0usize;
    let scale = loop {
        let pool: f64 = weights
            .iter()
            .zip(&forced)
            .filter(|(_, &f)| !f)
            .map(|(w, _)| w)
            .sum();
        let remaining = (k - n_forced) as f64;
        let scale = remaining / pool;
        if n - n_forced == k - n_forced {
            forced.iter_mut().for_each(|f| *f = true);
            n_forced = n;
            break scale;
        }
        let mut grew = false;
        for (w, f) in weights.iter().zip(forced.iter_mut()) {
            if !*f && w * scale > 1.0 {
                *f = true;
                n_forced += 1;
                grew = true;
            }
        }
        if !grew {
            break scale;
        }
    };
    let probs = raw
        .keys()
        .zip(weights.iter().zip(&forced))
        .map(|(&id, (&w, &f))| (id, if f { 1.0 } else { w * scale }))
        .collect();
    debug_assert!(n_forced <= k);
    InclusionPlan::new(probs, k, StrategyTag::new("capped", None))
}

/// Expected predicted reward of a plan: sum of probability times prediction.
pub fn expected_reward(plan: &InclusionPlan, predictions: &IdMap) -> Result<f64> {
    check_same_ids(plan.probs(), predictions, "expected_reward")?;
    Ok(plan
        .probs()
        .iter()
        .map(|(id, p)| p * predictions[id])
        .sum())
}
