//! Ground-truth machinery used to check everything else.
//!
//! Nothing here calls into `design` or `estimators`: inclusion probabilities are
//! obtained by summing over explicit subset distributions, estimator moments by
//! evaluating every outcome, and the regularized optima by plain projected
//! gradient ascent on the simplex. The only dependency on the production path
//! is [`pareto_design_mc`], whose purpose is to measure the Pareto sampler.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::sampler;
use crate::types::{IdMap, InclusionPlan, JointInclusion, ObsId};

/// Largest population the enumeration routines accept.
pub const MAX_ENUM_N: usize = 15;

/// An explicit probability law over size-K subsets of `ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignDistribution {
    ids: Vec<ObsId>,
    /// Each subset is a sorted list of positions into `ids`.
    support: Vec<(Vec<usize>, f64)>,
    k: usize,
}

impl DesignDistribution {
    pub fn new(ids: Vec<ObsId>, support: Vec<(Vec<ObsId>, f64)>, k: usize) -> Result<Self> {
        if ids.len() > MAX_ENUM_N {
            return Err(Error::invalid(format!(
                "design over {} ids exceeds enumeration limit {MAX_ENUM_N}",
                ids.len()
            )));
        }
        let pos: BTreeMap<ObsId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        if pos.len() != ids.len() {
            return Err(Error::invalid("design ids are not unique"));
        }
        let mut merged: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        let mut total = 0.0;
        for (subset, p) in support {
            if !(p >= 0.0) {
                return Err(Error::invalid(format!("negative subset probability {p}")));
            }
            let mut idx = subset
                .iter()
                .map(|id| {
                    pos.get(id)
                        .copied()
                        .ok_or_else(|| Error::invalid(format!("subset id {id} not in design")))
                })
                .collect::<Result<Vec<_>>>()?;
            idx.sort_unstable();
            idx.dedup();
            if idx.len() != k {
                return Err(Error::invalid(format!(
                    "subset of size {} in a size-{k} design",
                    idx.len()
                )));
            }
            total += p;
            *merged.entry(idx).or_insert(0.0) += p;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("subset probabilities sum to {total}")));
        }
        Ok(Self {
            ids,
            support: merged.into_iter().collect(),
            k,
        })
    }

    pub fn ids(&self) -> &[ObsId] {
        &self.ids
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn support(&self) -> impl Iterator<Item = (Vec<ObsId>, f64)> + '_ {
        self.support
            .iter()
            .map(|(s, p)| (s.iter().map(|&i| self.ids[i]).collect(), *p))
    }

    pub fn support_len(&self) -> usize {
        self.support.len()
    }
}

/// Exact first-order and pairwise inclusion probabilities by summation.
pub fn enumerate_inclusion(design: &DesignDistribution) -> (IdMap, JointInclusion) {
    let n = design.ids.len();
    let mut first = vec![0.0; n];
    let mut joint = vec![0.0; n * n];
    for (subset, p) in &design.support {
        for &i in subset {
            first[i] += p;
            for &j in subset {
                joint[i * n + j] += p;
            }
        }
    }
    let first_map = design.ids.iter().copied().zip(first).collect();
    let joint = JointInclusion::from_dense(design.ids.clone(), joint)
        .expect("dense joint matrix has the right shape");
    (first_map, joint)
}

/// Exact mean and variance of an estimator over the design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorMoments {
    pub model: Moments,
    pub ipw: Moments,
    pub dr: Moments,
}

/// Exact moments of the model, IPW and DR estimators with rewards held fixed,
/// by evaluating each estimator on every subset in the support.
pub fn enumerate_estimator_moments(
    design: &DesignDistribution,
    rewards: &IdMap,
    predictions: &IdMap,
    pi_hat: &IdMap,
) -> Result<EstimatorMoments> {
    let lookup = |m: &IdMap, id: &ObsId, what: &str| {
        m.get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("{what} missing for {id}")))
    };
    let n = design.ids.len();
    let mut r = Vec::with_capacity(n);
    let mut f = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for id in &design.ids {
        r.push(lookup(rewards, id, "reward")?);
        f.push(lookup(predictions, id, "prediction")?);
        let p = lookup(pi_hat, id, "target probability")?;
        if !(p > 0.0) {
            return Err(Error::invalid(format!("target probability of {id} is {p}")));
        }
        w.push(p);
    }
    let pred_total: f64 = f.iter().sum();

    let mut outcomes = Vec::with_capacity(design.support.len());
    for (subset, p) in &design.support {
        let mut model = pred_total;
        let mut ipw = 0.0;
        let mut dr = pred_total;
        for &i in subset {
            model += r[i] - f[i];
            ipw += r[i] / w[i];
            dr += (r[i] - f[i]) / w[i];
        }
        outcomes.push((*p, [model, ipw, dr]));
    }
    let moments = |k: usize| {
        let mean: f64 = outcomes.iter().map(|(p, v)| p * v[k]).sum();
        let variance: f64 = outcomes
            .iter()
            .map(|(p, v)| p * (v[k] - mean).powi(2))
            .sum();
        Moments { mean, variance }
    };
    Ok(EstimatorMoments {
        model: moments(0),
        ipw: moments(1),
        dr: moments(2),
    })
}

/// Which regularized reward objective to maximize over the simplex.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Expected predicted reward plus beta times Shannon entropy.
    Entropy,
    /// Expected predicted reward minus beta times KL to the proportional law.
    Kl,
}

const LOG_FLOOR: f64 = 1e-12;
const MAX_ASCENT_ITERS: usize = 100_000;
const BISECTION_ITERS: usize = 200;

/// Objective value at a point of the simplex (K = 1).
pub fn objective_value(objective: Objective, pi: &[f64], predictions: &[f64], beta: f64) -> f64 {
    let reward: f64 = pi.iter().zip(predictions).map(|(p, f)| p * f).sum();
    match objective {
        Objective::Entropy => {
            let ent: f64 = pi.iter().map(|&p| -p * p.max(LOG_FLOOR).ln()).sum();
            reward + beta * ent
        }
        Objective::Kl => {
            let total: f64 = predictions.iter().sum();
            let kl: f64 = pi
                .iter()
                .zip(predictions)
                .map(|(&p, &f)| p * (p.max(LOG_FLOOR) / (f / total)).ln())
                .sum();
            reward - beta * kl
        }
    }
}

fn objective_gradient(objective: Objective, pi: &[f64], predictions: &[f64], beta: f64) -> Vec<f64> {
    let total: f64 = predictions.iter().sum();
    pi.iter()
        .zip(predictions)
        .map(|(&p, &f)| {
            let lp = p.max(LOG_FLOOR).ln();
            match objective {
                Objective::Entropy => f - beta * (1.0 + lp),
                Objective::Kl => f - beta * (1.0 + lp - (f / total).ln()),
            }
        })
        .collect()
}

/// Projection of `pi + d` onto the simplex in the metric `sum_x h_x d_x^2`:
/// `d_x = max((g_x - nu) / h_x, -pi_x)`, with `nu` found by bisection. The
/// residual mass is folded into the largest coordinate so `sum d = 0` exactly.
fn scaled_direction(pi: &[f64], grad: &[f64], h: &[f64]) -> Vec<f64> {
    let step = |nu: f64| -> Vec<f64> {
        pi.iter()
            .zip(grad.iter().zip(h))
            .map(|(&p, (&g, &hx))| ((g - nu) / hx).max(-p))
            .collect()
    };
    let mass = |nu: f64| step(nu).iter().sum::<f64>();
    let (mut lo, mut hi) = (-1.0, 1.0);
    while mass(lo) < 0.0 {
        lo *= 2.0;
    }
    while mass(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut d = step(0.5 * (lo + hi));
    let top = (0..pi.len()).max_by(|&a, &b| pi[a].total_cmp(&pi[b])).expect("nonempty");
    let rest: f64 = d.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, v)| v).sum();
    d[top] = -rest;
    d
}

/// Maximize the K = 1 regularized objective by scaled gradient projection:
/// each step projects the gradient step onto the simplex in the metric of the
/// regularizer's diagonal curvature `beta / pi`, then backtracks (Armijo)
/// along that direction. Stops once an accepted step improves the objective
/// by less than `tol`.
pub fn numeric_maximize(
    objective: Objective,
    predictions: &IdMap,
    beta: f64,
    tol: f64,
) -> Result<IdMap> {
    let n = predictions.len();
    if n == 0 || n > 12 {
        return Err(Error::invalid(format!("numeric maximizer supports 1..=12 ids, got {n}")));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be > 0, got {beta}")));
    }
    let f: Vec<f64> = predictions.values().copied().collect();
    if objective == Objective::Kl && f.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::invalid("KL objective needs positive predictions"));
    }
    let finish = |pi: Vec<f64>| Ok(predictions.keys().copied().zip(pi).collect());
    let mut pi = vec![1.0 / n as f64; n];
    let mut value = objective_value(objective, &pi, &f, beta);
    for _ in 0..MAX_ASCENT_ITERS {
        let grad = objective_gradient(objective, &pi, &f, beta);
        let h: Vec<f64> = pi.iter().map(|&p| beta / p.max(LOG_FLOOR)).collect();
        let d = scaled_direction(&pi, &grad, &h);
        let ascent: f64 = grad.iter().zip(&d).map(|(g, dx)| g * dx).sum();
        if !(ascent > 0.0) {
            return finish(pi);
        }
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-18 {
            let cand: Vec<f64> = pi.iter().zip(&d).map(|(p, dx)| (p + t * dx).max(0.0)).collect();
            let cand_value = objective_value(objective, &cand, &f, beta);
            if cand_value >= value + 1e-4 * t * ascent {
                accepted = Some((cand, cand_value));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cand_value)) = accepted else {
            // No acceptable step: stationary to machine precision.
            return finish(pi);
        };
        let gain = cand_value - value;
        pi = cand;
        value = cand_value;
        if gain < tol {
            return finish(pi);
        }
    }
    Err(Error::NoConvergence(format!(
        "projected gradient ascent exceeded {MAX_ASCENT_ITERS} iterations"
    )))
}

/// Empirical subset distribution of the Pareto sampler over `trials` draws.
pub fn pareto_design_mc(plan: &InclusionPlan, trials: usize, seed: u64) -> Result<DesignDistribution> {
    if plan.len() > 12 {
        return Err(Error::invalid(format!(
            "empirical design needs at most 12 ids, plan has {}",
            plan.len()
        )));
    }
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    let ids: Vec<ObsId> = plan.probs().keys().copied().collect();
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for t in 0..trials {
        let mut idx = sampler::pareto_positions(plan, rng::derive_seed(seed, &[t as u64]));
        idx.sort_unstable();
        *counts.entry(idx).or_insert(0) += 1;
    }
    let support = counts
        .into_iter()
        .map(|(s, c)| (s.iter().map(|&i| ids[i]).collect(), c as f64 / trials as f64))
        .collect();
    DesignDistribution::new(ids, support, plan.budget())
}

/// Positions selected by systematic sampling with start `u` over `pi` taken in
/// the given order. Exactly round(sum pi) positions are returned.
fn systematic_select(pi: &[f64], order: &[usize], u: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut lo = 0.0_f64;
    for &i in order {
        let hi = lo + pi[i];
        // integers in [lo - u, hi - u)
        let hits = (hi - u).ceil() - (lo - u).ceil();
        if hits >= 1.0 {
            out.push(i);
        }
        lo = hi;
    }
    out
}

fn check_fixed_size(pi: &IdMap) -> Result<usize> {
    let total: f64 = pi.values().sum();
    let k = total.round();
    if (total - k).abs() > 1e-9 || k < 1.0 {
        return Err(Error::invalid(format!(
            "probabilities sum to {total}, not a positive integer"
        )));
    }
    if let Some((id, p)) = pi.iter().find(|(_, &p)| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::invalid(format!("probability of {id} is {p}")));
    }
    Ok(k as usize)
}

/// The exact systematic-sampling design for `pi` in ingestion order.
///
/// Systematic sampling reproduces any fixed-size first-order inclusion
/// probabilities exactly, so it serves as the exact-π reference design.
pub fn systematic_design(pi: &IdMap) -> Result<DesignDistribution> {
    let k = check_fixed_size(pi)?;
    let ids: Vec<ObsId> = pi.keys().copied().collect();
    let probs: Vec<f64> = pi.values().copied().collect();
    let order: Vec<usize> = (0..ids.len()).collect();
    let mut cuts = vec![0.0, 1.0];
    let mut acc = 0.0;
    for &p in &probs {
        acc += p;
        let frac = acc - acc.floor();
        if frac > 1e-13 && frac < 1.0 - 1e-13 {
            cuts.push(frac);
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
    let mut support = Vec::new();
    for w in cuts.windows(2) {
        let width = w[1] - w[0];
        if width <= 0.0 {
            continue;
        }
        let subset = systematic_select(&probs, &order, 0.5 * (w[0] + w[1]));
        if subset.len() != k {
            return Err(Error::invalid("systematic selection lost its fixed size"));
        }
        support.push((subset.into_iter().map(|i| ids[i]).collect(), width));
    }
    // Renormalize away the rounding of the cut widths.
    let total: f64 = support.iter().map(|(_, p)| p).sum();
    for (_, p) in &mut support {
        *p /= total;
    }
    DesignDistribution::new(ids, support, k)
}

/// One draw from randomized systematic sampling: a fresh random ordering and
/// a uniform start. First-order inclusion probabilities equal `pi` exactly.
pub fn systematic_draw<R: Rng + ?Sized>(pi: &IdMap, rng: &mut R) -> Result<Vec<ObsId>> {
    let k = check_fixed_size(pi)?;
    let ids: Vec<ObsId> = pi.keys().copied().collect();
    let probs: Vec<f64> = pi.values().copied().collect();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(rng);
    let u: f64 = rng.random();
    let mut picked = systematic_select(&probs, &order, u);
    if picked.len() != k {
        return Err(Error::invalid("systematic selection lost its fixed size"));
    }
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| ids[i]).collect())
}

/// A random explicit design over `ids` in which every id has positive
/// inclusion probability.
pub fn random_design<R: Rng + ?Sized>(ids: &[ObsId], k: usize, rng: &mut R) -> Result<DesignDistribution> {
    let n = ids.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("size {k} outside [1, {n}]")));
    }
    let mut subsets: Vec<Vec<ObsId>> = Vec::new();
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(rng);
    for chunk in shuffled.chunks(k) {
        let mut s = chunk.to_vec();
        while s.len() < k {
            let extra = ids[rng.random_range(0..n)];
            if !s.contains(&extra) {
                s.push(extra);
            }
        }
        subsets.push(s);
    }
    let extra = rng.random_range(0..8);
    for _ in 0..extra {
        let mut pool = ids.to_vec();
        pool.shuffle(rng);
        subsets.push(pool[..k].to_vec());
    }
    let weights: Vec<f64> = subsets.iter().map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let support = subsets
        .into_iter()
        .zip(weights)
        .map(|(s, w)| (s, w / total))
        .collect();
    DesignDistribution::new(ids.to_vec(), support, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{id_map, seq_ids};

    fn all_subsets(n: usize, k: usize) -> Vec<Vec<ObsId>> {
        let mut out = Vec::new();
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize == k {
                out.push((0..n).filter(|i| mask & (1 << i) != 0).map(|i| ObsId(i as u64)).collect());
            }
        }
        out
    }

    #[test]
    fn uniform_two_of_four() {
        let subsets = all_subsets(4, 2);
        assert_eq!(subsets.len(), 6);
        let support = subsets.into_iter().map(|s| (s, 1.0 / 6.0)).collect();
        let d = DesignDistribution::new(seq_ids(4), support, 2).unwrap();
        let (first, joint) = enumerate_inclusion(&d);
        for p in first.values() {
            assert!((p - 0.5).abs() < 1e-12);
        }
        for x in 0..4 {
            for z in 0..4 {
                let expect = if x == z { 0.5 } else { 1.0 / 6.0 };
                assert!((joint.at(x, z) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn design_identities_on_random_designs() {
        let mut rng = rng::rng_from(4);
        for _ in 0..50 {
            let n = rng.random_range(2..=9);
            let k = rng.random_range(1..=n.min(4));
            let d = random_design(&seq_ids(n), k, &mut rng).unwrap();
            let (first, joint) = enumerate_inclusion(&d);
            let pi: Vec<f64> = first.values().copied().collect();
            assert!((pi.iter().sum::<f64>() - k as f64).abs() < 1e-9);
            for x in 0..n {
                let pair: f64 = (0..n).filter(|&z| z != x).map(|z| joint.at(x, z)).sum();
                assert!((pair - (k as f64 - 1.0) * pi[x]).abs() < 1e-9);
                let cov: f64 = (0..n)
                    .filter(|&z| z != x)
                    .map(|z| pi[x] * pi[z] - joint.at(x, z))
                    .sum();
                assert!((cov - pi[x] * (1.0 - pi[x])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn oversize_design_refused() {
        let err = DesignDistribution::new(seq_ids(16), vec![], 1).unwrap_err();
        assert!(err.to_string().contains("limit"));
    }

    #[test]
    fn two_outcome_design_moments() {
        // Pr({x1}) = 0.6, Pr({x2}) = 0.4, rewards [0.5, 0.25].
        let ids = seq_ids(2);
        let d = DesignDistribution::new(
            ids.clone(),
            vec![(vec![ObsId(0)], 0.6), (vec![ObsId(1)], 0.4)],
            1,
        )
        .unwrap();
        let r = id_map(&ids, &[0.5, 0.25]);
        let pi = id_map(&ids, &[0.6, 0.4]);
        let m = enumerate_estimator_moments(&d, &r, &r, &pi).unwrap();
        assert!((m.ipw.mean - 0.75).abs() < 1e-12);
        let expect = 0.6 * (0.5 / 0.6 - 0.75_f64).powi(2) + 0.4 * (0.25 / 0.4 - 0.75_f64).powi(2);
        assert!((m.ipw.variance - expect).abs() < 1e-12);
        assert!((m.ipw.variance - 0.010_416_666_666_666_7).abs() < 1e-9);
        // zero residuals: DR is constant
        assert!(m.dr.variance.abs() < 1e-15);
    }

    #[test]
    fn maximizer_symmetric_input_gives_uniform() {
        let f = id_map(&seq_ids(5), &[0.4; 5]);
        for obj in [Objective::Entropy, Objective::Kl] {
            let pi = numeric_maximize(obj, &f, 0.3, 1e-14).unwrap();
            for p in pi.values() {
                assert!((p - 0.2).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn maximizer_two_point_values() {
        let f = id_map(&seq_ids(2), &[0.2, 0.4]);
        let e = std::f64::consts::E;
        let pi = numeric_maximize(Objective::Entropy, &f, 0.2, 1e-15).unwrap();
        assert!((pi[0] - 1.0 / (1.0 + e)).abs() < 1e-5);
        assert!((pi[1] - e / (1.0 + e)).abs() < 1e-5);
        let pi = numeric_maximize(Objective::Kl, &f, 0.2, 1e-15).unwrap();
        assert!((pi[0] - 1.0 / (1.0 + 2.0 * e)).abs() < 1e-5);
        assert!((pi[1] - 2.0 * e / (1.0 + 2.0 * e)).abs() < 1e-5);
    }

    #[test]
    fn systematic_design_is_exact() {
        let ids = seq_ids(5);
        let pi = id_map(&ids, &[0.3, 0.9, 0.25, 0.55, 1.0]);
        let d = systematic_design(&pi).unwrap();
        let (first, _) = enumerate_inclusion(&d);
        for (id, p) in &pi {
            assert!((first[id] - p).abs() < 1e-12, "{id}: {} vs {p}", first[id]);
        }
    }

    #[test]
    fn systematic_draw_frequencies() {
        let ids = seq_ids(4);
        let pi = id_map(&ids, &[0.2, 0.8, 0.5, 0.5]);
        let mut rng = rng::rng_from(1);
        let trials = 40_000;
        let mut counts = [0usize; 4];
        for _ in 0..trials {
            let s = systematic_draw(&pi, &mut rng).unwrap();
            assert_eq!(s.len(), 2);
            for id in s {
                counts[id.0 as usize] += 1;
            }
        }
        for (i, p) in pi.values().enumerate() {
            let f = counts[i] as f64 / trials as f64;
            assert!((f - p).abs() < 0.01);
        }
    }
}
