//! Population-total estimators, their exact bias and variance, and the
//! a priori variance and concentration bounds for entropy and KL sampling.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{check_same_ids, SUM_TOL, BiasReport, EstimateReport, IdMap, JointInclusion, ObsId, SampleDraw};

fn observed(draw: &SampleDraw) -> Result<()> {
    if draw.is_observed() {
        Ok(())
    } else {
        Err(Error::Contract("draw has no realized rewards".into()))
    }
}

fn prediction(predictions: &IdMap, id: ObsId) -> Result<f64> {
    predictions
        .get(&id)
        .copied()
        .ok_or_else(|| Error::invalid(format!("missing prediction for {id}")))
}

fn target(draw: &SampleDraw, id: ObsId) -> Result<f64> {
    match draw.plan().prob(id) {
        Some(p) if p > 0.0 => Ok(p),
        Some(p) => Err(Error::Contract(format!("target probability of {id} is {p}"))),
        None => Err(Error::Contract(format!("{id} not in plan"))),
    }
}

/// Sampled rewards plus predictions for everything not sampled.
pub fn estimate_model(draw: &SampleDraw, predictions: &IdMap) -> Result<f64> {
    observed(draw)?;
    let selected: HashSet<ObsId> = draw.selected().iter().copied().collect();
    let mut total = draw.realized_total();
    for &id in draw.plan().probs().keys() {
        if !selected.contains(&id) {
            total += prediction(predictions, id)?;
        }
    }
    Ok(total)
}

/// Horvitz-Thompson: sampled rewards weighted by inverse target probability.
pub fn estimate_ipw(draw: &SampleDraw) -> Result<f64> {
    observed(draw)?;
    draw.rewards()
        .iter()
        .map(|(&id, r)| Ok(r / target(draw, id)?))
        .sum()
}

/// Doubly robust: all predictions plus inverse-probability weighted residuals
/// of the sampled ids.
pub fn estimate_dr(draw: &SampleDraw, predictions: &IdMap) -> Result<f64> {
    observed(draw)?;
    let mut total = 0.0;
    for &id in draw.plan().probs().keys() {
        total += prediction(predictions, id)?;
    }
    for (&id, r) in draw.rewards() {
        total += (r - prediction(predictions, id)?) / target(draw, id)?;
    }
    Ok(total)
}

/// All three estimates plus the realized reward of the draw.
pub fn estimate_all(draw: &SampleDraw, predictions: &IdMap, pop_true: f64) -> Result<EstimateReport> {
    Ok(EstimateReport {
        pop_true,
        est_model: estimate_model(draw, predictions)?,
        est_ipw: estimate_ipw(draw)?,
        est_dr: estimate_dr(draw, predictions)?,
        reward_realized: draw.realized_total(),
    })
}

/// Signed bias of the three estimators given true and target inclusion
/// probabilities:
///
/// * model: `sum delta_x (pi_x - 1)`
/// * IPW: `sum E[r_x] (lambda_x - 1)`
/// * DR: `sum delta_x (lambda_x - 1)`
///
/// with `delta_x = E[r_x] - prediction_x` and `lambda_x = pi_x / target_x`.
pub fn bias_closed_form(
    mean_rewards: &IdMap,
    predictions: &IdMap,
    pi_true: &IdMap,
    pi_hat: &IdMap,
) -> Result<BiasReport> {
    check_same_ids(mean_rewards, predictions, "bias: predictions")?;
    check_same_ids(mean_rewards, pi_true, "bias: true probabilities")?;
    check_same_ids(mean_rewards, pi_hat, "bias: target probabilities")?;
    let mut delta = IdMap::with_capacity(mean_rewards.len());
    let mut lambda = IdMap::with_capacity(mean_rewards.len());
    let (mut bias_model, mut bias_ipw, mut bias_dr) = (0.0, 0.0, 0.0);
    for (&id, &mean) in mean_rewards {
        let pi = pi_true[&id];
        let target = pi_hat[&id];
        if !(target > 0.0) {
            return Err(Error::invalid(format!("target probability of {id} is {target}")));
        }
        if !(pi > 0.0 && pi <= 1.0 + SUM_TOL) {
            return Err(Error::invalid(format!("true probability of {id} is {pi}")));
        }
        let d = mean - predictions[&id];
        let l = pi / target;
        bias_model += d * (pi - 1.0);
        bias_ipw += mean * (l - 1.0);
        bias_dr += d * (l - 1.0);
        delta.insert(id, d);
        lambda.insert(id, l);
    }
    Ok(BiasReport {
        delta,
        lambda,
        bias_model,
        bias_ipw,
        bias_dr,
    })
}

/// True inclusion probabilities of a design plus the per-arm function whose
/// weighted total is being estimated (`r` for IPW, `r - prediction` for DR).
#[derive(Debug, Clone)]
pub struct VarianceInputs {
    first_order: IdMap,
    joint: JointInclusion,
    theta: IdMap,
}

impl VarianceInputs {
    pub fn new(first_order: IdMap, joint: JointInclusion, theta: IdMap) -> Result<Self> {
        check_same_ids(&first_order, &theta, "variance: theta")?;
        if joint.len() != first_order.len() {
            return Err(Error::invalid("variance: joint matrix size differs"));
        }
        if !joint.is_symmetric(1e-12) {
            return Err(Error::invalid("variance: joint inclusion map is not symmetric"));
        }
        for (&id, &p) in &first_order {
            let diag = joint
                .get(id, id)
                .ok_or_else(|| Error::invalid(format!("variance: {id} missing from joint map")))?;
            if (diag - p).abs() > 1e-12 {
                return Err(Error::invalid(format!(
                    "variance: joint diagonal {diag} differs from first-order {p} for {id}"
                )));
            }
            if !(p > 0.0) {
                return Err(Error::invalid(format!("variance: probability of {id} is {p}")));
            }
        }
        Ok(Self {
            first_order,
            joint,
            theta,
        })
    }

    fn aligned(&self) -> (Vec<f64>, Vec<f64>) {
        let ids = self.joint.ids();
        let pi = ids.iter().map(|id| self.first_order[id]).collect();
        let theta = ids.iter().map(|id| self.theta[id]).collect();
        (pi, theta)
    }
}

/// Sampling variance of `sum_{x in S} theta(x) / pi(x)` when the targets equal
/// the true probabilities:
/// `1/2 sum_{x,z} (theta_x/pi_x - theta_z/pi_z)^2 (pi_x pi_z - pi_xz)`.
pub fn variance_closed_form(inputs: &VarianceInputs) -> Result<f64> {
    let (pi, theta) = inputs.aligned();
    let n = pi.len();
    let mut total = 0.0;
    for x in 0..n {
        let ax = theta[x] / pi[x];
        for z in 0..n {
            let az = theta[z] / pi[z];
            total += (ax - az).powi(2) * (pi[x] * pi[z] - inputs.joint.at(x, z));
        }
    }
    Ok(0.5 * total)
}

/// Sampling variance of `sum_{x in S} theta(x) / target(x)` for arbitrary
/// positive targets, from indicator variances and covariances.
pub fn variance_with_targets(inputs: &VarianceInputs, pi_hat: &IdMap) -> Result<f64> {
    check_same_ids(&inputs.first_order, pi_hat, "variance: targets")?;
    let (pi, theta) = inputs.aligned();
    let w: Vec<f64> = inputs.joint.ids().iter().map(|id| pi_hat[id]).collect();
    if let Some(p) = w.iter().find(|&&p| !(p > 0.0)) {
        return Err(Error::invalid(format!("variance: target probability {p}")));
    }
    let n = pi.len();
    let mut total = 0.0;
    for x in 0..n {
        let ax = theta[x] / w[x];
        total += ax * ax * pi[x] * (1.0 - pi[x]);
        for z in 0..n {
            if z != x {
                total += ax * theta[z] / w[z] * (inputs.joint.at(x, z) - pi[x] * pi[z]);
            }
        }
    }
    Ok(total)
}

/// Which regularized design a bound refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundStrategy {
    Entropy,
    Kl,
}

/// A priori variance and concentration constants for one period.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    /// Bound on the IPW variance.
    pub c1: f64,
    /// Bound on the DR variance (twice `c1`).
    pub c1_dr: f64,
    /// Skew measure driving the Hoeffding half-width.
    pub gamma: f64,
    pub g: IdMap,
    pub d: IdMap,
    pub phimin: f64,
}

fn bound(predictions: &IdMap, beta: f64, k: usize, strategy: BoundStrategy) -> Result<BoundReport> {
    if predictions.is_empty() {
        return Err(Error::invalid("bound: no predictions"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("bound: beta must be > 0, got {beta}")));
    }
    if k == 0 || k > predictions.len() {
        return Err(Error::invalid(format!("bound: budget {k} outside [1, {}]", predictions.len())));
    }
    if predictions.values().any(|v| !v.is_finite()) {
        return Err(Error::invalid("bound: non-finite prediction"));
    }
    let phimin = predictions.values().copied().fold(f64::INFINITY, f64::min);
    if strategy == BoundStrategy::Kl && !(phimin > 0.0) {
        return Err(Error::invalid(format!(
            "bound: KL bound needs a positive minimum prediction, got {phimin}"
        )));
    }
    let g: IdMap = predictions
        .iter()
        .map(|(&id, &f)| (id, ((f - phimin) / beta).exp()))
        .collect();
    let d: IdMap = predictions
        .iter()
        .map(|(&id, &f)| {
            (
                id,
                match strategy {
                    BoundStrategy::Entropy => 1.0,
                    BoundStrategy::Kl => f / phimin,
                },
            )
        })
        .collect();
    let a: Vec<f64> = g.values().zip(d.values()).map(|(g, d)| g * d).collect();
    let total: f64 = a.iter().sum();
    if !total.is_finite() {
        return Err(Error::invalid("bound: exponential weights overflow"));
    }
    // Assumption: K times the uncapped K = 1 solution stays at or below one.
    let worst = a.iter().copied().fold(0.0, f64::max) / total * k as f64;
    if worst > 1.0 + 1e-12 {
        return Err(Error::Contract(format!(
            "bound: largest scaled probability is {worst} > 1; cap the plan or lower the budget"
        )));
    }
    let sq: f64 = a.iter().map(|v| v * v).sum();
    let c1 = total * total / k as f64 - sq;
    Ok(BoundReport {
        c1,
        c1_dr: 2.0 * c1,
        gamma: total,
        g,
        d,
        phimin,
    })
}

/// Variance bound for entropy sampling with exact inclusion probabilities.
pub fn bound_entropy(predictions: &IdMap, beta: f64, k: usize) -> Result<BoundReport> {
    bound(predictions, beta, k, BoundStrategy::Entropy)
}

/// Variance bound for KL sampling with exact inclusion probabilities.
pub fn bound_kl(predictions: &IdMap, beta: f64, k: usize) -> Result<BoundReport> {
    bound(predictions, beta, k, BoundStrategy::Kl)
}

/// `sum_x D_x exp((prediction_x - min) / beta)`.
pub fn gamma(predictions: &IdMap, beta: f64, strategy: BoundStrategy) -> Result<f64> {
    if predictions.is_empty() || !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid("gamma: need predictions and beta > 0"));
    }
    let phimin = predictions.values().copied().fold(f64::INFINITY, f64::min);
    if strategy == BoundStrategy::Kl && !(phimin > 0.0) {
        return Err(Error::invalid("gamma: KL needs positive predictions"));
    }
    let total: f64 = predictions
        .values()
        .map(|&f| {
            let d = match strategy {
                BoundStrategy::Entropy => 1.0,
                BoundStrategy::Kl => f / phimin,
            };
            d * ((f - phimin) / beta).exp()
        })
        .sum();
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::invalid("gamma: exponential weights overflow"))
    }
}

/// Half-width `gamma / sqrt(2m) * sqrt(ln(2/delta))` of the Hoeffding interval
/// for the mean of `m` independent IPW estimates under exact inclusion
/// probabilities. The Pareto approximation adds an O(log K / sqrt K) term
/// that is not included.
pub fn hoeffding_halfwidth(
    predictions: &IdMap,
    beta: f64,
    strategy: BoundStrategy,
    m: usize,
    delta: f64,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::invalid("hoeffding: m must be >= 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("hoeffding: delta {delta} outside (0, 1)")));
    }
    let g = gamma(predictions, beta, strategy)?;
    Ok(halfwidth_from_gamma(g, m, delta))
}

pub fn halfwidth_from_gamma(gamma: f64, m: usize, delta: f64) -> f64 {
    gamma / (2.0 * m as f64).sqrt() * (2.0 / delta).ln().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{id_map, seq_ids, InclusionPlan, StrategyTag};

    fn draw(pi: &[f64], k: usize, selected: &[u64], rewards: &[f64]) -> SampleDraw {
        let ids = seq_ids(pi.len());
        let plan = InclusionPlan::new(id_map(&ids, pi), k, StrategyTag::default()).unwrap();
        SampleDraw::new(plan, selected.iter().map(|&i| ObsId(i)).collect())
            .unwrap()
            .observe(&id_map(&ids, rewards))
            .unwrap()
    }

    #[test]
    fn model_estimate_cases() {
        let d = draw(&[1.0, 1.0, 1.0], 3, &[0, 1, 2], &[0.2, 0.5, 0.9]);
        let f = id_map(&seq_ids(3), &[0.0; 3]);
        assert!((estimate_model(&d, &f).unwrap() - 1.6).abs() < 1e-12);
        let d = draw(&[0.5, 0.5, 1.0], 2, &[0, 2], &[0.2, 0.5, 0.9]);
        let f = id_map(&seq_ids(3), &[0.3, 0.4, 0.8]);
        assert!((estimate_model(&d, &f).unwrap() - 1.5).abs() < 1e-12);
        let perfect = id_map(&seq_ids(3), &[0.2, 0.5, 0.9]);
        assert!((estimate_model(&d, &perfect).unwrap() - 1.6).abs() < 1e-12);
    }

    #[test]
    fn ipw_estimate_cases() {
        let d = draw(&[1.0, 1.0, 1.0], 3, &[0, 1, 2], &[0.2, 0.5, 0.9]);
        assert!((estimate_ipw(&d).unwrap() - 1.6).abs() < 1e-12);
        let d = draw(&[0.5, 0.5, 1.0], 2, &[0, 2], &[0.2, 0.5, 0.9]);
        assert!((estimate_ipw(&d).unwrap() - 1.3).abs() < 1e-12);
    }

    #[test]
    fn dr_estimate_cases() {
        let d = draw(&[0.5, 0.5, 1.0], 2, &[0, 2], &[0.2, 0.5, 0.9]);
        let f = id_map(&seq_ids(3), &[0.3, 0.4, 0.8]);
        assert!((estimate_dr(&d, &f).unwrap() - 1.4).abs() < 1e-12);
        let perfect = id_map(&seq_ids(3), &[0.2, 0.5, 0.9]);
        assert!((estimate_dr(&d, &perfect).unwrap() - 1.6).abs() < 1e-12);
    }

    #[test]
    fn missing_prediction_is_an_error() {
        let d = draw(&[0.5, 0.5, 1.0], 2, &[0, 2], &[0.2, 0.5, 0.9]);
        let f = id_map(&seq_ids(2), &[0.3, 0.4]);
        assert!(estimate_dr(&d, &f).is_err());
        let f = id_map(&[ObsId(0), ObsId(2)], &[0.3, 0.8]);
        assert!(estimate_model(&d, &f).is_err());
    }

    #[test]
    fn unobserved_draw_is_contract_error() {
        let ids = seq_ids(2);
        let plan = InclusionPlan::new(id_map(&ids, &[0.5, 0.5]), 1, StrategyTag::default()).unwrap();
        let d = SampleDraw::new(plan, vec![ObsId(0)]).unwrap();
        assert!(matches!(estimate_ipw(&d), Err(Error::Contract(_))));
    }

    #[test]
    fn bias_cases() {
        let ids = seq_ids(2);
        let mean = id_map(&ids, &[0.5, 0.25]);
        let pi = id_map(&ids, &[0.6, 0.4]);
        let b = bias_closed_form(&mean, &mean, &pi, &pi).unwrap();
        assert_eq!((b.bias_ipw, b.bias_dr, b.bias_model), (0.0, 0.0, 0.0));
        let hat = id_map(&ids, &[0.5, 0.5]);
        let f = id_map(&ids, &[0.3, 0.3]);
        let b = bias_closed_form(&mean, &f, &pi, &hat).unwrap();
        assert!((b.bias_ipw - 0.05).abs() < 1e-12);
        assert!((b.lambda[&ObsId(0)] - 1.2).abs() < 1e-12);
        let b = bias_closed_form(&mean, &mean, &pi, &hat).unwrap();
        assert_eq!(b.bias_model, 0.0);
        assert_eq!(b.bias_dr, 0.0);
    }

    fn two_point_inputs(theta: [f64; 2]) -> VarianceInputs {
        let ids = seq_ids(2);
        let joint = JointInclusion::from_dense(ids.clone(), vec![0.6, 0.0, 0.0, 0.4]).unwrap();
        VarianceInputs::new(id_map(&ids, &[0.6, 0.4]), joint, id_map(&ids, &theta)).unwrap()
    }

    #[test]
    fn variance_two_point_design() {
        let v = variance_closed_form(&two_point_inputs([0.5, 0.25])).unwrap();
        assert!((v - 0.010_416_666_666_666_7).abs() < 1e-9);
        let v2 = variance_with_targets(&two_point_inputs([0.5, 0.25]), &id_map(&seq_ids(2), &[0.6, 0.4])).unwrap();
        assert!((v - v2).abs() < 1e-12);
    }

    #[test]
    fn proportional_theta_has_zero_variance() {
        let v = variance_closed_form(&two_point_inputs([0.3, 0.2])).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn asymmetric_joint_rejected() {
        let ids = seq_ids(2);
        let joint = JointInclusion::from_dense(ids.clone(), vec![0.6, 0.1, 0.0, 0.4]).unwrap();
        assert!(VarianceInputs::new(id_map(&ids, &[0.6, 0.4]), joint, id_map(&ids, &[1.0, 1.0])).is_err());
    }

    #[test]
    fn entropy_bound_cases() {
        let f = id_map(&seq_ids(10), &[0.4; 10]);
        let b = bound_entropy(&f, 0.5, 2).unwrap();
        assert!((b.c1 - 40.0).abs() < 1e-9);
        assert!((b.c1_dr - 80.0).abs() < 1e-9);
        assert!((b.gamma - 10.0).abs() < 1e-12);
        let f = id_map(&seq_ids(6), &[0.1, 0.5, 0.2, 0.9, 0.3, 0.6]);
        let b = bound_entropy(&f, 1e9, 3).unwrap();
        assert!((b.c1 - (36.0 / 3.0 - 6.0)).abs() < 1e-6);
    }

    #[test]
    fn assumption_violation_is_contract_error() {
        let f = id_map(&seq_ids(3), &[0.9, 0.1, 0.1]);
        assert!(matches!(bound_entropy(&f, 0.05, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn kl_bound_reduces_to_entropy_for_flat_predictions() {
        let f = id_map(&seq_ids(5), &[0.3; 5]);
        let a = bound_entropy(&f, 0.2, 2).unwrap();
        let b = bound_kl(&f, 0.2, 2).unwrap();
        assert!((a.c1 - b.c1).abs() < 1e-12);
        assert!(bound_kl(&id_map(&seq_ids(2), &[0.0, 0.3]), 0.2, 1).is_err());
    }

    #[test]
    fn hoeffding_cases() {
        assert!((halfwidth_from_gamma(10.0, 50, 0.05) - 1.920_646).abs() < 1e-6);
        let f = id_map(&seq_ids(7), &[0.25; 7]);
        assert!((gamma(&f, 0.3, BoundStrategy::Entropy).unwrap() - 7.0).abs() < 1e-12);
        assert!(hoeffding_halfwidth(&f, 0.3, BoundStrategy::Entropy, 0, 0.05).is_err());
        assert!(hoeffding_halfwidth(&f, 0.3, BoundStrategy::Entropy, 5, 1.0).is_err());
    }
}
