//! Drawing fixed-size samples that respect an [`InclusionPlan`].
//!
//! * [`draw_sequential`]: exact inverse-CDF draw when the budget is one.
//! * [`draw_pareto`]: Pareto order sampling for any budget. Each id gets a
//!   uniform `U` from a stream keyed by `(seed, id)` and the ranking variable
//!   `V = U (1 - p) / ((1 - U) p)`; the `K` smallest `V` are kept.
//! * [`draw_two_stage`]: the cluster design used by adaptive bin sampling.

use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;

use crate::design::ClusterPlan;
use crate::error::{Error, Result};
use crate::rng;
use crate::types::{IdMap, InclusionPlan, ObsId, SampleDraw};

/// Uniform on the open interval (0, 1) from the `(seed, id)` stream.
fn open_uniform(seed: u64, id: ObsId) -> f64 {
    let mut stream = rng::keyed_rng(seed, id.0);
    loop {
        let u: f64 = stream.random();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}

/// Pareto ranking variable. Forced ids rank first with `V = 0`.
#[inline]
pub fn pareto_rank(u: f64, p: f64) -> f64 {
    if p >= 1.0 {
        0.0
    } else {
        u * (1.0 - p) / ((1.0 - u) * p)
    }
}

/// Positions (into the plan's ingestion order) chosen by one Pareto draw,
/// returned in ascending order.
pub fn pareto_positions(plan: &InclusionPlan, seed: u64) -> Vec<usize> {
    let k = plan.budget();
    let mut ranked: Vec<(f64, usize)> = plan
        .probs()
        .iter()
        .enumerate()
        .map(|(pos, (&id, &p))| (pareto_rank(open_uniform(seed, id), p), pos))
        .collect();
    let by_rank = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
    };
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k - 1, by_rank);
        ranked.truncate(k);
    }
    let mut picked: Vec<usize> = ranked.into_iter().map(|(_, pos)| pos).collect();
    picked.sort_unstable();
    picked
}

/// One Pareto order sample of exactly `plan.budget()` ids.
pub fn draw_pareto(plan: &InclusionPlan, seed: u64) -> Result<SampleDraw> {
    let selected = pareto_positions(plan, seed)
        .into_iter()
        .map(|pos| *plan.probs().get_index(pos).expect("position in range").0)
        .collect();
    SampleDraw::new(plan.clone(), selected)
}

/// Exact single draw for budget one: inverse CDF over ingestion order.
pub fn draw_sequential(plan: &InclusionPlan, seed: u64) -> Result<SampleDraw> {
    if plan.budget() != 1 {
        return Err(Error::Contract(format!(
            "sequential draw needs budget 1, plan has {}",
            plan.budget()
        )));
    }
    let u: f64 = rng::rng_from(seed).random();
    let mut acc = 0.0;
    let mut chosen = None;
    for (&id, &p) in plan.probs() {
        acc += p;
        chosen = Some(id);
        if u < acc {
            break;
        }
    }
    let id = chosen.expect("plan is non-empty");
    SampleDraw::new(plan.clone(), vec![id])
}

/// Selection frequency of each id across `trials` independent Pareto draws.
pub fn empirical_inclusion(plan: &InclusionPlan, trials: usize, seed: u64) -> Result<IdMap> {
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    let n = plan.len();
    let counts = (0..trials as u64)
        .into_par_iter()
        .fold(
            || vec![0u64; n],
            |mut acc, t| {
                for pos in pareto_positions(plan, rng::derive_seed(seed, &[t])) {
                    acc[pos] += 1;
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; n],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    Ok(plan
        .probs()
        .keys()
        .zip(counts)
        .map(|(&id, c)| (id, c as f64 / trials as f64))
        .collect())
}

/// Two-stage cluster draw: the non-greedy budget is allocated to clusters by
/// `K - Z` draws with replacement from the cluster probabilities, then each
/// cluster contributes that many members chosen uniformly without
/// replacement. Greedy ids are always included.
///
/// The expected allocation to cluster `h` is `(K - Z) pi(C_h)`, so each member
/// is included with probability `(K - Z) pi(C_h) / |C_h|`, matching the plan.
pub fn draw_two_stage(plan: &InclusionPlan, clusters: &ClusterPlan, seed: u64) -> Result<SampleDraw> {
    let mut stream = rng::rng_from(seed);
    let greedy = clusters.greedy_set();
    let draws = plan.budget() - greedy.len();
    let probs = clusters.cluster_probs();
    let mut alloc = vec![0usize; probs.len()];
    for _ in 0..draws {
        let u: f64 = stream.random();
        let mut acc = 0.0;
        let mut h = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                h = i;
                break;
            }
        }
        alloc[h] += 1;
    }
    let mut selected: Vec<ObsId> = greedy.to_vec();
    for (h, &take) in alloc.iter().enumerate() {
        let members = clusters.members(h);
        if take > members.len() {
            return Err(Error::Contract(format!(
                "cluster {h} has {} members, asked for {take}",
                members.len()
            )));
        }
        let picked = rand::seq::index::sample(&mut stream, members.len(), take);
        selected.extend(picked.into_iter().map(|i| members[i]));
    }
    let order: std::collections::HashMap<ObsId, usize> = plan
        .probs()
        .keys()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    selected.sort_by_key(|id| order.get(id).copied().unwrap_or(usize::MAX));
    SampleDraw::new(plan.clone(), selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{id_map, seq_ids, StrategyTag};

    fn plan(vals: &[f64], k: usize) -> InclusionPlan {
        InclusionPlan::new(id_map(&seq_ids(vals.len()), vals), k, StrategyTag::default()).unwrap()
    }

    #[test]
    fn point_mass_sequential() {
        let p = plan(&[1.0], 1);
        for s in 0..20 {
            assert_eq!(draw_sequential(&p, s).unwrap().selected(), &[ObsId(0)]);
        }
    }

    #[test]
    fn sequential_rejects_budget_above_one() {
        let p = plan(&[1.0, 1.0], 2);
        assert!(matches!(draw_sequential(&p, 0), Err(Error::Contract(_))));
    }

    fn sequential_freqs(vals: &[f64], trials: u64) -> Vec<f64> {
        let p = plan(vals, 1);
        let mut counts = vec![0usize; vals.len()];
        for s in 0..trials {
            let d = draw_sequential(&p, s).unwrap();
            counts[d.selected()[0].0 as usize] += 1;
        }
        counts.iter().map(|&c| c as f64 / trials as f64).collect()
    }

    #[test]
    fn sequential_frequencies_match_plan() {
        for vals in [&[0.5, 0.5][..], &[0.2, 0.3, 0.5][..]] {
            let f = sequential_freqs(vals, 100_000);
            for (a, b) in f.iter().zip(vals) {
                assert!((a - b).abs() < 0.01, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn pareto_fixed_size_and_forced() {
        let p = plan(&[1.0, 0.2, 0.3, 0.5, 1.0], 3);
        for s in 0..500 {
            let d = draw_pareto(&p, s).unwrap();
            assert_eq!(d.selected().len(), 3);
            assert!(d.selected().contains(&ObsId(0)));
            assert!(d.selected().contains(&ObsId(4)));
        }
    }

    #[test]
    fn pareto_deterministic_per_seed() {
        let p = plan(&[0.4, 0.6, 0.5, 0.5], 2);
        assert_eq!(draw_pareto(&p, 11).unwrap(), draw_pareto(&p, 11).unwrap());
    }

    #[test]
    fn pareto_rank_formula() {
        assert_eq!(pareto_rank(0.3, 1.0), 0.0);
        assert!((pareto_rank(0.5, 0.25) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_plan_empirical_inclusion() {
        let n = 20;
        let k = 4;
        let p = plan(&vec![k as f64 / n as f64; n], k);
        let trials = 20_000;
        let freq = empirical_inclusion(&p, trials, 3).unwrap();
        let target = k as f64 / n as f64;
        let se = (target * (1.0 - target) / trials as f64).sqrt();
        for f in freq.values() {
            assert!((f - target).abs() < 4.0 * se);
        }
        let total: f64 = freq.values().sum();
        assert!((total - k as f64).abs() < 1e-9);
    }

    #[test]
    fn forced_frequency_is_exactly_one() {
        let p = plan(&[1.0, 0.5, 0.5], 2);
        let freq = empirical_inclusion(&p, 1000, 0).unwrap();
        assert_eq!(freq[&ObsId(0)], 1.0);
    }
}
