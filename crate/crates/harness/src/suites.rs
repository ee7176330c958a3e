//! Property suites behind `popest verify`.
//!
//! Each suite returns a [`SuiteReport`] of named checks, each with the
//! measured value and the threshold it was held to.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use popest::design::{cap_and_renormalize, entropy_plan, kl_plan};
use popest::estimators::{
    bias_closed_form, bound_entropy, bound_kl, hoeffding_halfwidth, variance_closed_form, variance_with_targets,
    BoundReport, BoundStrategy, VarianceInputs,
};
use popest::oracle::{
    enumerate_estimator_moments, enumerate_inclusion, numeric_maximize, objective_value, random_design,
    systematic_draw, Objective,
};
use popest::rng::{derive_seed, rng_from, tag};
use popest::sampler::empirical_inclusion;
use popest::types::{id_map, seq_ids};
use popest::{IdMap, InclusionPlan, ObsId};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Pareto,
    Estimators,
    Bounds,
    Prop1,
    AppendixC,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Pareto, Suite::Estimators, Suite::Bounds, Suite::Prop1, Suite::AppendixC];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Pareto => "pareto",
            Suite::Estimators => "estimators",
            Suite::Bounds => "bounds",
            Suite::Prop1 => "prop1",
            Suite::AppendixC => "appendixC",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Suite::ALL.iter().map(|s| s.name()).collect();
                HarnessError::Config(format!("suite: unknown name {s:?}, expected one of {names:?}"))
            })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    /// Passes when `value <= threshold`.
    fn at_most(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
            detail: detail.into(),
        }
    }
}

/// Target and empirical inclusion probability of one id.
#[derive(Debug, Clone, Serialize)]
pub struct InclusionPoint {
    pub id: ObsId,
    pub target: f64,
    pub empirical: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub seed: u64,
    pub elapsed_seconds: f64,
    pub checks: Vec<Check>,
    #[serde(skip)]
    pub inclusion: Vec<InclusionPoint>,
}

impl SuiteReport {
    fn new(suite: Suite, seed: u64, started: Instant, checks: Vec<Check>) -> Self {
        Self {
            suite: suite.name().into(),
            passed: checks.iter().all(|c| c.passed),
            seed,
            elapsed_seconds: started.elapsed().as_secs_f64(),
            checks,
            inclusion: Vec::new(),
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    match suite {
        Suite::Pareto => pareto_suite(&ParetoParams { seed, ..Default::default() }),
        Suite::Estimators => estimators_suite(seed, 100),
        Suite::Bounds => bounds_suite(&BoundsParams { seed, ..Default::default() }),
        Suite::Prop1 => prop1_suite(seed, 50),
        Suite::AppendixC => appendix_c_suite(seed, 100),
    }
}

/// Budget-`k` plan over the grid `0, 0.01, ..., 1` with weights `exp(3x)`.
pub fn softmax_grid_plan(k: usize) -> Result<InclusionPlan> {
    let w: Vec<f64> = (0..=100).map(|i| (3.0 * i as f64 / 100.0).exp()).collect();
    Ok(cap_and_renormalize(&id_map(&seq_ids(w.len()), &w), k)?)
}

#[derive(Debug, Clone)]
pub struct ParetoParams {
    pub seed: u64,
    pub budget: usize,
    pub trials: usize,
    pub tolerance: f64,
    /// Budgets whose relative approximation errors must not grow.
    pub trend_budgets: (usize, usize),
    pub trend_trials: usize,
    pub max_seconds: f64,
}

impl Default for ParetoParams {
    fn default() -> Self {
        Self {
            seed: 0,
            budget: 20,
            trials: 10_000,
            tolerance: 0.02,
            trend_budgets: (10, 40),
            trend_trials: 100_000,
            max_seconds: 10.0,
        }
    }
}

pub fn pareto_suite(p: &ParetoParams) -> Result<SuiteReport> {
    let started = Instant::now();
    let plan = softmax_grid_plan(p.budget)?;
    let emp = empirical_inclusion(&plan, p.trials, derive_seed(p.seed, &[tag("grid")]))?;
    let inclusion: Vec<InclusionPoint> = plan
        .probs()
        .iter()
        .map(|(&id, &target)| InclusionPoint {
            id,
            target,
            empirical: emp[&id],
        })
        .collect();
    let worst = inclusion
        .iter()
        .map(|pt| (pt.empirical - pt.target).abs())
        .fold(0.0, f64::max);
    let grid_seconds = started.elapsed().as_secs_f64();
    let mut checks = vec![
        Check::at_most(
            "softmax-grid-max-deviation",
            worst,
            p.tolerance,
            format!("N=101, K={}, {} draws", p.budget, p.trials),
        ),
        Check::at_most("softmax-grid-seconds", grid_seconds, p.max_seconds, "wall time of the grid check"),
    ];

    let rel = |k: usize, label: u64| -> Result<f64> {
        let plan = softmax_grid_plan(k)?;
        let emp = empirical_inclusion(&plan, p.trend_trials, derive_seed(p.seed, &[tag("trend"), label]))?;
        Ok(plan
            .probs()
            .iter()
            .map(|(id, t)| (emp[id] / t - 1.0).abs())
            .fold(0.0, f64::max))
    };
    let (small, large) = p.trend_budgets;
    let (e_small, e_large) = (rel(small, 0)?, rel(large, 1)?);
    checks.push(Check::at_most(
        "relative-error-shrinks-with-budget",
        e_large,
        e_small,
        format!("max |empirical/target - 1|: K={small} {e_small:.4}, K={large} {e_large:.4}"),
    ));
    let mut report = SuiteReport::new(Suite::Pareto, p.seed, started, checks);
    report.inclusion = inclusion;
    Ok(report)
}

const PROP1_MAX_SECONDS: f64 = 30.0;

/// Closed-form entropy and KL plans versus projected gradient ascent on random
/// budget-one instances.
pub fn prop1_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let started = Instant::now();
    let gaps: Vec<(f64, f64)> = (0..instances as u64)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let mut rng = rng_from(derive_seed(seed, &[tag("prop1"), i]));
            let n = rng.random_range(2..=12);
            let beta = (rng.random_range(0.05f64.ln()..5.0f64.ln())).exp();
            let preds: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let map = id_map(&seq_ids(n), &preds);
            let mut worst_gap = (0.0f64, f64::NEG_INFINITY);
            for (objective, plan) in [
                (Objective::Entropy, entropy_plan(&map, beta, 1)?),
                (Objective::Kl, kl_plan(&map, beta, 1)?),
            ] {
                let closed: Vec<f64> = plan.probs().values().copied().collect();
                let numeric: Vec<f64> = numeric_maximize(objective, &map, beta, 1e-12)?.values().copied().collect();
                let a = objective_value(objective, &closed, &preds, beta);
                let b = objective_value(objective, &numeric, &preds, beta);
                worst_gap.0 = worst_gap.0.max((a - b).abs());
                worst_gap.1 = worst_gap.1.max(b - a);
            }
            Ok(worst_gap)
        })
        .collect::<Result<_>>()?;
    let abs_gap = gaps.iter().map(|g| g.0).fold(0.0, f64::max);
    let deficit = gaps.iter().map(|g| g.1).fold(f64::NEG_INFINITY, f64::max);
    let checks = vec![
        Check::at_most(
            "closed-form-within-tolerance",
            abs_gap,
            1e-5,
            format!("{instances} instances, N <= 12, beta in [0.05, 5]"),
        ),
        Check::at_most(
            "numeric-never-beats-closed-form",
            deficit,
            1e-5,
            "max(numeric objective - closed-form objective)",
        ),
        Check::at_most("seconds", started.elapsed().as_secs_f64(), PROP1_MAX_SECONDS, "wall time"),
    ];
    Ok(SuiteReport::new(Suite::Prop1, seed, started, checks))
}

pub fn appendix_c_suite(seed: u64, designs: usize) -> Result<SuiteReport> {
    let started = Instant::now();
    let mut worst = [0.0f64; 3];
    for i in 0..designs as u64 {
        let mut rng = rng_from(derive_seed(seed, &[tag("appendixC"), i]));
        let n = rng.random_range(2..=10);
        let k = rng.random_range(1..=n.min(4));
        let design = random_design(&seq_ids(n), k, &mut rng)?;
        let (pi, joint) = enumerate_inclusion(&design);
        let p: Vec<f64> = joint.ids().iter().map(|id| pi[id]).collect();
        worst[0] = worst[0].max((p.iter().sum::<f64>() - k as f64).abs());
        for x in 0..n {
            let others: f64 = (0..n).filter(|&z| z != x).map(|z| joint.at(x, z)).sum();
            worst[1] = worst[1].max((others - (k as f64 - 1.0) * p[x]).abs());
            let cov: f64 = (0..n).filter(|&z| z != x).map(|z| p[x] * p[z] - joint.at(x, z)).sum();
            worst[2] = worst[2].max((cov - p[x] * (1.0 - p[x])).abs());
        }
    }
    let detail = format!("{designs} random designs, N <= 10, K <= 4");
    let checks = vec![
        Check::at_most("first-order-sum-equals-budget", worst[0], 1e-9, detail.clone()),
        Check::at_most("pairwise-sum-identity", worst[1], 1e-9, detail.clone()),
        Check::at_most("covariance-row-identity", worst[2], 1e-9, detail),
    ];
    Ok(SuiteReport::new(Suite::AppendixC, seed, started, checks))
}

fn uniform_map(ids: &[ObsId], lo: f64, rng: &mut impl Rng) -> IdMap {
    ids.iter().map(|&id| (id, rng.random_range(lo..1.0))).collect()
}

/// Closed-form bias and variance against full enumeration on random designs
/// with arbitrary targets and predictions.
pub fn estimators_suite(seed: u64, designs: usize) -> Result<SuiteReport> {
    let started = Instant::now();
    // bias model/ipw/dr, variance ipw/dr exact targets, variance ipw/dr
    // arbitrary targets, unbiasedness ipw/dr
    let mut worst = [0.0f64; 9];
    for i in 0..designs as u64 {
        let mut rng = rng_from(derive_seed(seed, &[tag("estimators"), i]));
        let n = rng.random_range(2..=10);
        let k = rng.random_range(1..=n.min(4));
        let ids = seq_ids(n);
        let design = random_design(&ids, k, &mut rng)?;
        let (pi, joint) = enumerate_inclusion(&design);
        let rewards = uniform_map(&ids, 0.0, &mut rng);
        let preds = uniform_map(&ids, 0.0, &mut rng);
        let pi_hat = uniform_map(&ids, 0.05, &mut rng);
        let pop: f64 = rewards.values().sum();

        let skewed = enumerate_estimator_moments(&design, &rewards, &preds, &pi_hat)?;
        let bias = bias_closed_form(&rewards, &preds, &pi, &pi_hat)?;
        worst[0] = worst[0].max((skewed.model.mean - pop - bias.bias_model).abs());
        worst[1] = worst[1].max((skewed.ipw.mean - pop - bias.bias_ipw).abs());
        worst[2] = worst[2].max((skewed.dr.mean - pop - bias.bias_dr).abs());

        let residual: IdMap = rewards.iter().map(|(id, r)| (*id, r - preds[id])).collect();
        let ipw = VarianceInputs::new(pi.clone(), joint.clone(), rewards.clone())?;
        let dr = VarianceInputs::new(pi.clone(), joint.clone(), residual)?;
        let exact = enumerate_estimator_moments(&design, &rewards, &preds, &pi)?;
        worst[3] = worst[3].max((variance_closed_form(&ipw)? - exact.ipw.variance).abs());
        worst[4] = worst[4].max((variance_closed_form(&dr)? - exact.dr.variance).abs());
        worst[5] = worst[5].max((variance_with_targets(&ipw, &pi_hat)? - skewed.ipw.variance).abs());
        worst[6] = worst[6].max((variance_with_targets(&dr, &pi_hat)? - skewed.dr.variance).abs());
        worst[7] = worst[7].max((exact.ipw.mean - pop).abs());
        worst[8] = worst[8].max((exact.dr.mean - pop).abs());
    }
    let names = [
        "bias-model-matches-enumeration",
        "bias-ipw-matches-enumeration",
        "bias-dr-matches-enumeration",
        "variance-ipw-matches-enumeration",
        "variance-dr-matches-enumeration",
        "variance-ipw-arbitrary-targets",
        "variance-dr-arbitrary-targets",
        "ipw-unbiased-with-exact-targets",
        "dr-unbiased-with-exact-targets",
    ];
    let checks = names
        .iter()
        .zip(worst)
        .map(|(name, v)| Check::at_most(name, v, 1e-9, format!("{designs} random designs, N <= 10, K <= 4")))
        .collect();
    Ok(SuiteReport::new(Suite::Estimators, seed, started, checks))
}

#[derive(Debug, Clone)]
pub struct BoundsParams {
    pub seed: u64,
    pub instances: usize,
    pub draws: usize,
    pub meta_trials: usize,
    pub m: usize,
    pub delta: f64,
    pub max_violation_rate: f64,
}

impl Default for BoundsParams {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 50,
            draws: 10_000,
            meta_trials: 500,
            m: 50,
            delta: 0.05,
            max_violation_rate: 0.07,
        }
    }
}

/// A random instance satisfying the budget assumption for `strategy`.
struct BoundInstance {
    plan: InclusionPlan,
    preds: IdMap,
    rewards: Vec<f64>,
    bound: BoundReport,
    beta: f64,
}

fn bound_instance(rng: &mut impl Rng, strategy: BoundStrategy) -> Result<BoundInstance> {
    let n = rng.random_range(5..=30);
    let ids = seq_ids(n);
    let preds = id_map(&ids, &(0..n).map(|_| rng.random_range(0.05..1.0)).collect::<Vec<_>>());
    let beta = rng.random_range(0.2..3.0);
    let build = match strategy {
        BoundStrategy::Entropy => entropy_plan,
        BoundStrategy::Kl => kl_plan,
    };
    let top = build(&preds, beta, 1)?.probs().values().copied().fold(0.0, f64::max);
    let kmax = ((1.0 / top).floor() as usize).clamp(1, n);
    let k = rng.random_range(1..=kmax);
    let plan = build(&preds, beta, k)?;
    let bound = match strategy {
        BoundStrategy::Entropy => bound_entropy(&preds, beta, k)?,
        BoundStrategy::Kl => bound_kl(&preds, beta, k)?,
    };
    let rewards = (0..n).map(|_| rng.random::<f64>()).collect();
    Ok(BoundInstance {
        plan,
        preds,
        rewards,
        bound,
        beta,
    })
}

/// IPW and DR estimates from one exact (systematic) draw.
fn exact_draw_estimates(inst: &BoundInstance, rng: &mut impl Rng) -> Result<(f64, f64)> {
    let pi = inst.plan.probs();
    let mut ipw = 0.0;
    let mut dr: f64 = inst.preds.values().sum();
    for id in systematic_draw(pi, rng)? {
        let r = inst.rewards[id.0 as usize];
        ipw += r / pi[&id];
        dr += (r - inst.preds[&id]) / pi[&id];
    }
    Ok((ipw, dr))
}

fn variance(sum: f64, sum_sq: f64, n: usize) -> f64 {
    let m = n as f64;
    (sum_sq - sum * sum / m) / (m - 1.0)
}

pub fn bounds_suite(p: &BoundsParams) -> Result<SuiteReport> {
    let started = Instant::now();
    let mut checks = Vec::new();
    for (label, strategy) in [("entropy", BoundStrategy::Entropy), ("kl", BoundStrategy::Kl)] {
        let ratios: Vec<(f64, f64)> = (0..p.instances as u64)
            .into_par_iter()
            .map(|i| -> Result<(f64, f64)> {
                let mut rng = rng_from(derive_seed(p.seed, &[tag("bounds"), tag(label), i]));
                let inst = bound_instance(&mut rng, strategy)?;
                let (mut s, mut s2, mut d, mut d2) = (0.0, 0.0, 0.0, 0.0);
                for _ in 0..p.draws {
                    let (ipw, dr) = exact_draw_estimates(&inst, &mut rng)?;
                    s += ipw;
                    s2 += ipw * ipw;
                    d += dr;
                    d2 += dr * dr;
                }
                Ok((
                    variance(s, s2, p.draws) / inst.bound.c1,
                    variance(d, d2, p.draws) / inst.bound.c1_dr,
                ))
            })
            .collect::<Result<_>>()?;
        let count = |f: fn(&(f64, f64)) -> f64| ratios.iter().filter(|r| f(r) > 1.0).count() as f64;
        let worst = |f: fn(&(f64, f64)) -> f64| ratios.iter().map(f).fold(0.0, f64::max);
        checks.push(Check::at_most(
            &format!("{label}-ipw-variance-below-c1"),
            count(|r| r.0),
            0.0,
            format!("violations over {} instances; max variance/C1 = {:.3}", p.instances, worst(|r| r.0)),
        ));
        checks.push(Check::at_most(
            &format!("{label}-dr-variance-below-2c1"),
            count(|r| r.1),
            0.0,
            format!("violations over {} instances; max variance/(2 C1) = {:.3}", p.instances, worst(|r| r.1)),
        ));

        let mut rng = rng_from(derive_seed(p.seed, &[tag("coverage"), tag(label)]));
        let inst = bound_instance(&mut rng, strategy)?;
        let half = hoeffding_halfwidth(&inst.preds, inst.beta, strategy, p.m, p.delta)?;
        let pop: f64 = inst.rewards.iter().sum();
        let misses: usize = (0..p.meta_trials as u64)
            .into_par_iter()
            .map(|t| -> Result<usize> {
                let mut rng = rng_from(derive_seed(p.seed, &[tag("meta"), tag(label), t]));
                let mut total = 0.0;
                for _ in 0..p.m {
                    total += exact_draw_estimates(&inst, &mut rng)?.0;
                }
                Ok(usize::from((total / p.m as f64 - pop).abs() > half))
            })
            .sum::<Result<usize>>()?;
        let rate = misses as f64 / p.meta_trials as f64;
        checks.push(Check::at_most(
            &format!("{label}-hoeffding-violation-rate"),
            rate,
            p.max_violation_rate,
            format!(
                "{} meta-trials of m={} draws, delta={}, half-width {half:.4}",
                p.meta_trials, p.m, p.delta
            ),
        ));
    }
    Ok(SuiteReport::new(Suite::Bounds, p.seed, started, checks))
}
