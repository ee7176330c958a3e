//! Domain types shared by every layer: observations, periods, inclusion plans,
//! realized samples and estimate reports.
//!
//! Population quantities are totals throughout (never means).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Absolute tolerance for every "probabilities sum to K" check.
pub const SUM_TOL: f64 = 1e-9;

/// Stable observation identifier, assigned at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObsId(pub u64);

impl fmt::Display for ObsId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-observation real values (predictions, probabilities, rewards) in
/// ingestion order.
pub type IdMap = IndexMap<ObsId, f64>;

/// Law of the realized reward around its mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseSpec {
    #[default]
    None,
    Bernoulli,
    TruncatedGaussian { sigma: f64 },
}

impl NoiseSpec {
    const MAX_RESAMPLES: usize = 100;

    /// One realized reward with mean (approximately) `mean`, always in `[0, 1]`.
    pub fn sample<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> f64 {
        match *self {
            NoiseSpec::None => mean,
            NoiseSpec::Bernoulli => {
                if rng.random::<f64>() < mean {
                    1.0
                } else {
                    0.0
                }
            }
            NoiseSpec::TruncatedGaussian { sigma } => {
                if sigma <= 0.0 {
                    return mean;
                }
                let normal = Normal::new(mean, sigma).expect("sigma validated positive");
                let mut last = mean;
                for _ in 0..Self::MAX_RESAMPLES {
                    last = normal.sample(rng);
                    if (0.0..=1.0).contains(&last) {
                        return last;
                    }
                }
                last.clamp(0.0, 1.0)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::TruncatedGaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => Err(
                Error::invalid(format!("noise sigma must be finite and >= 0, got {sigma}")),
            ),
            _ => Ok(()),
        }
    }
}

/// One arm: a context vector plus a hidden reward law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub id: ObsId,
    pub context: Vec<f64>,
    /// E[r(x)], hidden from sampling strategies.
    pub mean_reward: f64,
    pub noise: NoiseSpec,
}

impl Observation {
    pub fn new(id: ObsId, context: Vec<f64>, mean_reward: f64, noise: NoiseSpec) -> Result<Self> {
        if !(0.0..=1.0).contains(&mean_reward) {
            return Err(Error::invalid(format!(
                "observation {id}: mean reward {mean_reward} outside [0, 1]"
            )));
        }
        noise.validate()?;
        Ok(Self {
            id,
            context,
            mean_reward,
            noise,
        })
    }
}

/// One round: the arms on offer and the number that may be sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Period {
    index: usize,
    observations: Vec<Observation>,
    budget: usize,
}

impl Period {
    pub fn new(index: usize, observations: Vec<Observation>, budget: usize) -> Result<Self> {
        let n = observations.len();
        if budget < 1 || budget > n {
            return Err(Error::invalid(format!(
                "period {index}: budget {budget} outside [1, {n}]"
            )));
        }
        let mut seen = BTreeSet::new();
        for obs in &observations {
            if !seen.insert(obs.id) {
                return Err(Error::invalid(format!(
                    "period {index}: duplicate observation id {}",
                    obs.id
                )));
            }
        }
        Ok(Self {
            index,
            observations,
            budget,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn ids(&self) -> Vec<ObsId> {
        self.observations.iter().map(|o| o.id).collect()
    }

    /// Same arms under a different budget.
    pub fn with_budget(&self, budget: usize) -> Result<Self> {
        Period::new(self.index, self.observations.clone(), budget)
    }

    /// Pop: the sum of expected rewards over every arm in the period.
    pub fn pop_true(&self) -> f64 {
        self.observations.iter().map(|o| o.mean_reward).sum()
    }

    pub fn mean_rewards(&self) -> IdMap {
        self.observations
            .iter()
            .map(|o| (o.id, o.mean_reward))
            .collect()
    }
}

/// Which strategy (and parameter) produced a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StrategyTag {
    pub name: String,
    pub param: Option<f64>,
}

impl StrategyTag {
    pub fn new(name: impl Into<String>, param: Option<f64>) -> Self {
        Self {
            name: name.into(),
            param,
        }
    }
}

/// Target inclusion probabilities for one period.
///
/// Invariants (checked at construction): every probability lies in `(0, 1]`,
/// they sum to the budget within [`SUM_TOL`], and `forced` is exactly the set
/// of ids whose probability equals one.
#[derive(Debug, Clone, PartialEq)]
pub struct InclusionPlan {
    probs: IdMap,
    budget: usize,
    forced: BTreeSet<ObsId>,
    tag: StrategyTag,
}

impl InclusionPlan {
    pub fn new(probs: IdMap, budget: usize, tag: StrategyTag) -> Result<Self> {
        if budget == 0 || budget > probs.len() {
            return Err(Error::invalid(format!(
                "plan budget {budget} outside [1, {}]",
                probs.len()
            )));
        }
        let mut sum = 0.0;
        let mut forced = BTreeSet::new();
        for (&id, &p) in &probs {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid(format!(
                    "inclusion probability of {id} is {p}, outside (0, 1]"
                )));
            }
            if p == 1.0 {
                forced.insert(id);
            }
            sum += p;
        }
        if (sum - budget as f64).abs() > SUM_TOL {
            return Err(Error::invalid(format!(
                "inclusion probabilities sum to {sum}, expected {budget}"
            )));
        }
        Ok(Self {
            probs,
            budget,
            forced,
            tag,
        })
    }

    pub fn probs(&self) -> &IdMap {
        &self.probs
    }

    pub fn prob(&self, id: ObsId) -> Option<f64> {
        self.probs.get(&id).copied()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn forced(&self) -> &BTreeSet<ObsId> {
        &self.forced
    }

    pub fn tag(&self) -> &StrategyTag {
        &self.tag
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn with_tag(mut self, tag: StrategyTag) -> Self {
        self.tag = tag;
        self
    }
}

/// A realized sample: the selected ids, their rewards once observed, and the
/// plan that was used to draw them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDraw {
    selected: Vec<ObsId>,
    rewards: IdMap,
    plan: InclusionPlan,
}

impl SampleDraw {
    /// An unobserved draw. `selected` must have exactly `plan.budget()`
    /// distinct ids from the plan and contain every forced id.
    pub fn new(plan: InclusionPlan, selected: Vec<ObsId>) -> Result<Self> {
        if selected.len() != plan.budget() {
            return Err(Error::Contract(format!(
                "draw selected {} ids, plan budget is {}",
                selected.len(),
                plan.budget()
            )));
        }
        let set: BTreeSet<ObsId> = selected.iter().copied().collect();
        if set.len() != selected.len() {
            return Err(Error::Contract("draw selected a duplicate id".into()));
        }
        if let Some(id) = selected.iter().find(|id| !plan.probs.contains_key(*id)) {
            return Err(Error::Contract(format!("selected id {id} not in plan")));
        }
        if let Some(id) = plan.forced.iter().find(|id| !set.contains(*id)) {
            return Err(Error::Contract(format!("forced id {id} not selected")));
        }
        Ok(Self {
            selected,
            rewards: IdMap::new(),
            plan,
        })
    }

    /// Attach realized rewards for the selected ids, taken from `realized`.
    pub fn observe(mut self, realized: &IdMap) -> Result<Self> {
        let mut rewards = IdMap::with_capacity(self.selected.len());
        for id in &self.selected {
            let r = realized
                .get(id)
                .copied()
                .ok_or_else(|| Error::invalid(format!("no realized reward for {id}")))?;
            rewards.insert(*id, r);
        }
        self.rewards = rewards;
        Ok(self)
    }

    pub fn selected(&self) -> &[ObsId] {
        &self.selected
    }

    pub fn rewards(&self) -> &IdMap {
        &self.rewards
    }

    pub fn plan(&self) -> &InclusionPlan {
        &self.plan
    }

    pub fn is_observed(&self) -> bool {
        self.rewards.len() == self.selected.len()
    }

    /// Sum of realized rewards over the selected ids.
    pub fn realized_total(&self) -> f64 {
        self.rewards.values().sum()
    }
}

/// Pairwise inclusion probabilities over an ordered id list, stored densely.
/// The diagonal holds first-order probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct JointInclusion {
    ids: Vec<ObsId>,
    index: BTreeMap<ObsId, usize>,
    dense: Vec<f64>,
}

impl JointInclusion {
    pub fn from_dense(ids: Vec<ObsId>, dense: Vec<f64>) -> Result<Self> {
        let n = ids.len();
        if dense.len() != n * n {
            return Err(Error::invalid(format!(
                "joint matrix has {} entries, expected {}",
                dense.len(),
                n * n
            )));
        }
        let index: BTreeMap<ObsId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        if index.len() != n {
            return Err(Error::invalid("joint inclusion ids are not unique"));
        }
        Ok(Self { ids, index, dense })
    }

    pub fn ids(&self) -> &[ObsId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// By position.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.dense[i * self.ids.len() + j]
    }

    /// By id.
    pub fn get(&self, x: ObsId, z: ObsId) -> Option<f64> {
        let i = *self.index.get(&x)?;
        let j = *self.index.get(&z)?;
        Some(self.at(i, j))
    }

    pub fn position(&self, x: ObsId) -> Option<usize> {
        self.index.get(&x).copied()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.ids.len();
        (0..n).all(|i| (0..i).all(|j| (self.at(i, j) - self.at(j, i)).abs() <= tol))
    }
}

/// Estimates and realized reward for one draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub pop_true: f64,
    pub est_model: f64,
    pub est_ipw: f64,
    pub est_dr: f64,
    pub reward_realized: f64,
}

/// Closed-form (signed) biases and the per-arm quantities behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    /// E[r(x)] - prediction.
    pub delta: IdMap,
    /// true / target inclusion probability.
    pub lambda: IdMap,
    pub bias_model: f64,
    pub bias_ipw: f64,
    pub bias_dr: f64,
}

/// One realized reward per observation, a pure function of `(period, seed)`.
///
/// Each observation draws from its own stream keyed by its id, so the result
/// does not depend on the period's ordering.
pub fn realize_rewards(period: &Period, seed: u64) -> IdMap {
    period
        .observations()
        .iter()
        .map(|obs| {
            let mut stream = rng::keyed_rng(seed, obs.id.0);
            (obs.id, obs.noise.sample(obs.mean_reward, &mut stream))
        })
        .collect()
}

/// Total realized reward of the selected observations across draws.
pub fn cumulative_reward<'a, I>(draws: I) -> f64
where
    I: IntoIterator<Item = &'a SampleDraw>,
{
    draws.into_iter().map(SampleDraw::realized_total).sum()
}

/// Helper for tests and callers that build maps from parallel slices.
pub fn id_map(ids: &[ObsId], values: &[f64]) -> IdMap {
    ids.iter().copied().zip(values.iter().copied()).collect()
}

/// Sequential ids `0..n`.
pub fn seq_ids(n: usize) -> Vec<ObsId> {
    (0..n as u64).map(ObsId).collect()
}

pub(crate) fn check_same_ids(a: &IdMap, b: &IdMap, what: &str) -> Result<()> {
    if a.len() != b.len() || a.keys().any(|k| !b.contains_key(k)) {
        return Err(Error::invalid(format!("{what}: id sets differ")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(id: u64, mean: f64, noise: NoiseSpec) -> Observation {
        Observation::new(ObsId(id), vec![0.0], mean, noise).unwrap()
    }

    #[test]
    fn deterministic_reward_equals_mean() {
        let p = Period::new(0, vec![obs(0, 0.7, NoiseSpec::None)], 1).unwrap();
        assert_eq!(realize_rewards(&p, 3)[&ObsId(0)], 0.7);
    }

    #[test]
    fn degenerate_bernoulli_is_one() {
        let p = Period::new(0, vec![obs(0, 1.0, NoiseSpec::Bernoulli)], 1).unwrap();
        for seed in 0..200 {
            assert_eq!(realize_rewards(&p, seed)[&ObsId(0)], 1.0);
        }
    }

    #[test]
    fn bernoulli_mean_matches_by_law_of_large_numbers() {
        let p = Period::new(0, vec![obs(5, 0.3, NoiseSpec::Bernoulli)], 1).unwrap();
        let n = 100_000;
        let total: f64 = (0..n).map(|s| realize_rewards(&p, s)[&ObsId(5)]).sum();
        assert!((total / n as f64 - 0.3).abs() < 0.01);
    }

    #[test]
    fn truncated_gaussian_stays_in_unit_interval() {
        let noise = NoiseSpec::TruncatedGaussian { sigma: 0.5 };
        let p = Period::new(0, vec![obs(0, 0.95, noise), obs(1, 0.02, noise)], 1).unwrap();
        for seed in 0..2000 {
            for r in realize_rewards(&p, seed).values() {
                assert!((0.0..=1.0).contains(r));
            }
        }
    }

    #[test]
    fn rewards_are_pure_in_seed_and_order_free() {
        let a = vec![obs(0, 0.4, NoiseSpec::Bernoulli), obs(1, 0.6, NoiseSpec::Bernoulli)];
        let mut b = a.clone();
        b.reverse();
        let pa = Period::new(0, a, 1).unwrap();
        let pb = Period::new(0, b, 1).unwrap();
        for seed in 0..50 {
            let ra = realize_rewards(&pa, seed);
            let rb = realize_rewards(&pb, seed);
            assert_eq!(ra[&ObsId(0)], rb[&ObsId(0)]);
            assert_eq!(ra[&ObsId(1)], rb[&ObsId(1)]);
        }
    }

    #[test]
    fn period_rejects_bad_budget_and_duplicates() {
        assert!(Period::new(0, vec![obs(0, 0.1, NoiseSpec::None)], 2).is_err());
        assert!(Period::new(0, vec![obs(0, 0.1, NoiseSpec::None)], 0).is_err());
        assert!(Period::new(
            0,
            vec![obs(0, 0.1, NoiseSpec::None), obs(0, 0.2, NoiseSpec::None)],
            1
        )
        .is_err());
    }

    #[test]
    fn mean_reward_outside_unit_interval_rejected() {
        assert!(Observation::new(ObsId(0), vec![], 1.2, NoiseSpec::None).is_err());
    }

    #[test]
    fn pop_true_is_sum_of_means() {
        let p = Period::new(
            0,
            vec![obs(0, 0.25, NoiseSpec::None), obs(1, 0.5, NoiseSpec::Bernoulli)],
            1,
        )
        .unwrap();
        assert_eq!(p.pop_true(), 0.75);
    }

    fn plan(vals: &[f64], k: usize) -> InclusionPlan {
        InclusionPlan::new(id_map(&seq_ids(vals.len()), vals), k, StrategyTag::default()).unwrap()
    }

    #[test]
    fn plan_invariants_checked() {
        let ids = seq_ids(2);
        assert!(InclusionPlan::new(id_map(&ids, &[0.5, 0.6]), 1, StrategyTag::default()).is_err());
        assert!(InclusionPlan::new(id_map(&ids, &[0.0, 1.0]), 1, StrategyTag::default()).is_err());
        let p = plan(&[1.0, 0.5, 0.5], 2);
        assert_eq!(p.forced().iter().copied().collect::<Vec<_>>(), vec![ObsId(0)]);
    }

    #[test]
    fn cumulative_reward_cases() {
        assert_eq!(cumulative_reward(&[]), 0.0);
        let realized = id_map(&seq_ids(2), &[0.2, 0.8]);
        let d1 = SampleDraw::new(plan(&[1.0, 1.0], 2), seq_ids(2))
            .unwrap()
            .observe(&realized)
            .unwrap();
        assert!((cumulative_reward(&[d1.clone()]) - 1.0).abs() < 1e-15);
        let d2 = SampleDraw::new(plan(&[0.5, 0.5], 1), vec![ObsId(0)])
            .unwrap()
            .observe(&id_map(&seq_ids(2), &[0.5, 0.1]))
            .unwrap();
        assert!((cumulative_reward(&[d1, d2]) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn draw_must_contain_forced_and_match_budget() {
        let p = plan(&[1.0, 0.5, 0.5], 2);
        assert!(SampleDraw::new(p.clone(), vec![ObsId(1), ObsId(2)]).is_err());
        assert!(SampleDraw::new(p.clone(), vec![ObsId(0)]).is_err());
        assert!(SampleDraw::new(p, vec![ObsId(0), ObsId(2)]).is_ok());
    }
}
