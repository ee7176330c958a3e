//! Adaptive bin sampling (ABS) baseline.
//!
//! The top `Z` predictions are taken greedily. The rest are smoothed
//! (logistic or exponential in a rescaled prediction), grouped into `H`
//! contiguous bins by a 1-D k-means with a minimum bin size of `K - Z`, and
//! each bin receives probability proportional to its mean smoothed value,
//! floored at the trim level. A member of bin `h` is then included with
//! probability `(K - Z) pi(C_h) / |C_h|`.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::types::{IdMap, InclusionPlan, ObsId, StrategyTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    Logistic,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsParams {
    pub smoothing: Smoothing,
    pub alpha: f64,
    /// Number of bins H.
    pub clusters: usize,
    /// Z = round(greedy_fraction * K).
    pub greedy_fraction: f64,
    /// Minimum bin probability.
    pub trim: f64,
}

impl Default for AbsParams {
    fn default() -> Self {
        Self {
            smoothing: Smoothing::Logistic,
            alpha: 1.0,
            clusters: 10,
            greedy_fraction: 0.1,
            trim: 0.0,
        }
    }
}

impl AbsParams {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be finite, got {}", self.alpha)));
        }
        if self.clusters < 1 {
            return Err(Error::invalid("ABS needs at least one cluster"));
        }
        if !(0.0..1.0).contains(&self.greedy_fraction) {
            return Err(Error::invalid(format!(
                "greedy fraction {} outside [0, 1)",
                self.greedy_fraction
            )));
        }
        if !(self.trim >= 0.0 && self.trim <= 1.0 / self.clusters as f64) {
            return Err(Error::invalid(format!(
                "trim {} outside [0, 1/H = {}]",
                self.trim,
                1.0 / self.clusters as f64
            )));
        }
        Ok(())
    }

    /// Z for budget `k`, kept strictly below `k`.
    pub fn greedy_count(&self, k: usize) -> usize {
        ((self.greedy_fraction * k as f64).round() as usize).min(k.saturating_sub(1))
    }
}

/// Bins produced by ABS.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPlan {
    assignment: IndexMap<ObsId, usize>,
    centers: Vec<f64>,
    cluster_probs: Vec<f64>,
    greedy: Vec<ObsId>,
    members: Vec<Vec<ObsId>>,
}

impl ClusterPlan {
    /// Bin index of every non-greedy id.
    pub fn assignment(&self) -> &IndexMap<ObsId, usize> {
        &self.assignment
    }

    /// Mean smoothed value A_h of each bin.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn cluster_probs(&self) -> &[f64] {
        &self.cluster_probs
    }

    /// The greedily included ids D, best first.
    pub fn greedy_set(&self) -> &[ObsId] {
        &self.greedy
    }

    pub fn members(&self, h: usize) -> &[ObsId] {
        &self.members[h]
    }

    pub fn cluster_count(&self) -> usize {
        self.members.len()
    }
}

/// Min-max rescale into `[lo, hi]`; constant input maps to the midpoint.
fn rescale(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 0.0 {
        return vec![0.5 * (lo + hi); values.len()];
    }
    values
        .iter()
        .map(|v| lo + (hi - lo) * (v - min) / (max - min))
        .collect()
}

const SMOOTH_FLOOR: f64 = 1e-300;

/// Smoothed values for the non-greedy predictions. `kappa_rank` is the
/// 1-based rank (descending) of the logistic midpoint among `values`.
fn smooth(values: &[f64], params: &AbsParams, kappa_rank: usize) -> Vec<f64> {
    let alpha = params.alpha;
    match params.smoothing {
        Smoothing::Logistic => {
            let y = rescale(values, -5.0, 5.0);
            let mut sorted = y.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
            let kappa = sorted[kappa_rank.clamp(1, sorted.len()) - 1];
            y.iter()
                .map(|v| (1.0 / (1.0 + (-alpha * (v - kappa)).exp())).max(SMOOTH_FLOOR))
                .collect()
        }
        Smoothing::Exponential => {
            let y = rescale(values, 0.0, 1.0);
            // exp(alpha * y) divided by its maximum; bin probabilities and
            // 1-D clusters are invariant to the common factor.
            let top = y
                .iter()
                .map(|v| alpha * v)
                .fold(f64::NEG_INFINITY, f64::max);
            y.iter()
                .map(|v| (alpha * v - top).exp().max(SMOOTH_FLOOR))
                .collect()
        }
    }
}

/// Relative gap below which two smoothed values are the same level.
const LEVEL_TOL: f64 = 1e-9;

/// Number of distinguishable values; bins never outnumber it.
fn distinct_levels(values: &[f64]) -> usize {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let scale = sorted.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    1 + sorted
        .windows(2)
        .filter(|w| w[1] - w[0] > LEVEL_TOL * scale)
        .count()
}

/// Partition `values` into `h` contiguous (in value order) groups of at least
/// `min_size` members by Lloyd iterations followed by a boundary repair.
/// Returns the group of each input position; groups are numbered by
/// increasing value.
pub(crate) fn constrained_kmeans_1d(values: &[f64], h: usize, min_size: usize, seed: u64) -> Vec<usize> {
    let n = values.len();
    assert!(h >= 1 && h * min_size <= n, "infeasible bin constraint");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite").then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    // k-means++ seeding
    let mut stream = rng::rng_from(seed);
    let mut centers = vec![sorted[stream.random_range(0..n)]];
    while centers.len() < h {
        let d2: Vec<f64> = sorted
            .iter()
            .map(|v| centers.iter().map(|c| (v - c).powi(2)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = stream.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            stream.random_range(0..n)
        };
        centers.push(sorted[pick]);
    }
    centers.sort_by(|a, b| a.partial_cmp(b).expect("finite"));

    let mut starts = vec![0usize; h];
    for _ in 0..200 {
        // nearest center; contiguous because both lists are sorted
        let mut next = vec![n; h];
        let mut c = 0;
        for (j, v) in sorted.iter().enumerate() {
            while c + 1 < h && (centers[c + 1] - v).abs() < (centers[c] - v).abs() {
                c += 1;
            }
            next[c] = next[c].min(j);
        }
        next[0] = 0;
        // empty groups start where the following group does
        for idx in (1..h).rev() {
            let after = if idx + 1 < h { next[idx + 1] } else { n };
            next[idx] = next[idx].min(after);
        }
        repair(&mut next, n, min_size);
        let converged = next == starts;
        starts = next;
        for (idx, c) in centers.iter_mut().enumerate() {
            let end = if idx + 1 < h { starts[idx + 1] } else { n };
            let seg = &sorted[starts[idx]..end];
            *c = seg.iter().sum::<f64>() / seg.len() as f64;
        }
        if converged {
            break;
        }
    }

    let mut label = vec![0usize; n];
    for idx in 0..h {
        let end = if idx + 1 < h { starts[idx + 1] } else { n };
        for &pos in &order[starts[idx]..end] {
            label[pos] = idx;
        }
    }
    label
}

/// Move segment boundaries so every segment has at least `min_size` members:
/// a forward pass pushes starts right, a backward pass pulls them left.
fn repair(starts: &mut [usize], n: usize, min_size: usize) {
    let h = starts.len();
    starts[0] = 0;
    for c in 1..h {
        starts[c] = starts[c].max(starts[c - 1] + min_size);
    }
    for c in (1..h).rev() {
        let next = if c + 1 < h { starts[c + 1] } else { n };
        starts[c] = starts[c].min(next - min_size);
    }
}

/// Bin probabilities proportional to `centers`, floored at `trim` with the
/// unfloored bins renormalized until nothing new falls below the floor.
pub(crate) fn trimmed_probs(centers: &[f64], trim: f64) -> Vec<f64> {
    let h = centers.len();
    let mut floored = vec![false; h];
    loop {
        let n_floored = floored.iter().filter(|&&f| f).count();
        let free_mass = 1.0 - trim * n_floored as f64;
        let free_sum: f64 = centers
            .iter()
            .zip(&floored)
            .filter(|(_, &f)| !f)
            .map(|(c, _)| c)
            .sum();
        let probs: Vec<f64> = centers
            .iter()
            .zip(&floored)
            .map(|(c, &f)| if f { trim } else { free_mass * c / free_sum })
            .collect();
        let mut grew = false;
        for (p, f) in probs.iter().zip(floored.iter_mut()) {
            if !*f && *p < trim {
                *f = true;
                grew = true;
            }
        }
        if !grew || floored.iter().all(|&f| f) {
            if floored.iter().all(|&f| f) {
                return vec![1.0 / h as f64; h];
            }
            return probs;
        }
    }
}

/// ABS inclusion probabilities and the bins behind them.
pub fn abs_plan(
    predictions: &IdMap,
    params: &AbsParams,
    k: usize,
    seed: u64,
) -> Result<(InclusionPlan, ClusterPlan)> {
    params.validate()?;
    let n = predictions.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("budget {k} outside [1, {n}]")));
    }
    if let Some((id, v)) = predictions.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::invalid(format!("prediction for {id} is {v}")));
    }
    let z = params.greedy_count(k);
    let per_bin = k - z;

    let entries: Vec<(ObsId, f64)> = predictions.iter().map(|(&id, &v)| (id, v)).collect();
    let mut by_pred: Vec<usize> = (0..n).collect();
    // descending prediction, ties by ingestion order
    by_pred.sort_by(|&a, &b| {
        entries[b].1.partial_cmp(&entries[a].1).expect("finite").then(a.cmp(&b))
    });
    let mut is_greedy = vec![false; n];
    let greedy: Vec<ObsId> = by_pred[..z]
        .iter()
        .map(|&i| {
            is_greedy[i] = true;
            entries[i].0
        })
        .collect();

    let rest: Vec<usize> = (0..n).filter(|&i| !is_greedy[i]).collect();
    if rest.len() < per_bin {
        return Err(Error::Infeasible(format!(
            "{} non-greedy ids cannot fill one bin of {per_bin}",
            rest.len()
        )));
    }
    let rest_preds: Vec<f64> = rest.iter().map(|&i| entries[i].1).collect();
    let smoothed = smooth(&rest_preds, params, per_bin);
    let h = params
        .clusters
        .min(rest.len() / per_bin)
        .min(distinct_levels(&smoothed));
    let labels = constrained_kmeans_1d(&smoothed, h, per_bin, seed);

    let mut members = vec![Vec::new(); h];
    let mut sums = vec![0.0; h];
    for (j, &label) in labels.iter().enumerate() {
        members[label].push(entries[rest[j]].0);
        sums[label] += smoothed[j];
    }
    let centers: Vec<f64> = sums
        .iter()
        .zip(&members)
        .map(|(s, m)| s / m.len() as f64)
        .collect();
    let cluster_probs = trimmed_probs(&centers, params.trim);

    let mut probs = IdMap::with_capacity(n);
    let mut assignment = IndexMap::with_capacity(rest.len());
    let mut label_of = vec![usize::MAX; n];
    for (j, &i) in rest.iter().enumerate() {
        label_of[i] = labels[j];
    }
    for (i, &(id, _)) in entries.iter().enumerate() {
        if is_greedy[i] {
            probs.insert(id, 1.0);
        } else {
            let c = label_of[i];
            let p = (per_bin as f64 * cluster_probs[c] / members[c].len() as f64).min(1.0);
            probs.insert(id, p);
            assignment.insert(id, c);
        }
    }
    let tag = StrategyTag::new(
        match params.smoothing {
            Smoothing::Logistic => "abs-logistic",
            Smoothing::Exponential => "abs-exponential",
        },
        Some(params.alpha),
    );
    let plan = InclusionPlan::new(probs, k, tag)?;
    Ok((
        plan,
        ClusterPlan {
            assignment,
            centers,
            cluster_probs,
            greedy,
            members,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{id_map, seq_ids};

    fn params(smoothing: Smoothing, alpha: f64, clusters: usize, greedy: f64) -> AbsParams {
        AbsParams {
            smoothing,
            alpha,
            clusters,
            greedy_fraction: greedy,
            trim: 0.0,
        }
    }

    #[test]
    fn flat_logistic_gives_uniform_non_greedy() {
        let preds = id_map(&seq_ids(30), &(0..30).map(|i| i as f64 / 30.0).collect::<Vec<_>>());
        let (plan, clusters) = abs_plan(&preds, &params(Smoothing::Logistic, 0.0, 3, 0.25), 4, 5).unwrap();
        assert_eq!(clusters.greedy_set(), &[ObsId(29)]);
        let rest: Vec<f64> = plan
            .probs()
            .iter()
            .filter(|(id, _)| !clusters.greedy_set().contains(id))
            .map(|(_, p)| *p)
            .collect();
        let spread = rest.iter().cloned().fold(f64::MIN, f64::max) - rest.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread <= 1e-12);
        assert!((rest[0] - 3.0 / 29.0).abs() < 1e-12);
    }

    #[test]
    fn exponential_alpha_zero_gives_uniform_bins() {
        let preds = id_map(&seq_ids(12), &[0.3, 0.1, 0.9, 0.5, 0.2, 0.8, 0.4, 0.6, 0.7, 0.05, 0.15, 0.25]);
        let (plan, clusters) = abs_plan(&preds, &params(Smoothing::Exponential, 0.0, 3, 0.0), 2, 1).unwrap();
        // identical smoothed values collapse into a single bin
        assert_eq!(clusters.cluster_probs(), &[1.0]);
        assert!(plan.probs().values().all(|p| (p - 2.0 / 12.0).abs() < 1e-12));
    }

    #[test]
    fn bin_probabilities_follow_centers() {
        let p = trimmed_probs(&[0.25, 0.75], 0.0);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        // with K - Z = 2 and bins of five: 2 * 0.25 / 5 and 2 * 0.75 / 5
        assert!((2.0 * p[0] / 5.0 - 0.1).abs() < 1e-15);
        assert!((2.0 * p[1] / 5.0 - 0.3).abs() < 1e-15);
    }

    #[test]
    fn two_separated_groups_form_two_bins() {
        let vals: Vec<f64> = (0..10).map(|i| if i < 5 { 0.1 + 0.001 * i as f64 } else { 0.9 + 0.001 * i as f64 }).collect();
        let preds = id_map(&seq_ids(10), &vals);
        let (plan, clusters) = abs_plan(&preds, &params(Smoothing::Exponential, 2.0, 2, 0.0), 2, 3).unwrap();
        assert_eq!(clusters.members(0).len(), 5);
        assert_eq!(clusters.members(1).len(), 5);
        let a = clusters.centers();
        let expect_low = 2.0 * a[0] / (a[0] + a[1]) / 5.0;
        let expect_high = 2.0 * a[1] / (a[0] + a[1]) / 5.0;
        for i in 0..5 {
            assert!((plan.probs()[i] - expect_low).abs() < 1e-12);
            assert!((plan.probs()[i + 5] - expect_high).abs() < 1e-12);
        }
    }

    #[test]
    fn trim_floors_small_bins() {
        let p = trimmed_probs(&[0.01, 0.01, 0.98], 0.2);
        assert!((p[0] - 0.2).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12);
        assert!((p[2] - 0.6).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repair_enforces_minimum_size() {
        let vals = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let labels = constrained_kmeans_1d(&vals, 3, 2, 0);
        let mut sizes = [0usize; 3];
        for l in labels {
            sizes[l] += 1;
        }
        assert!(sizes.iter().all(|&s| s >= 2), "{sizes:?}");
    }

    #[test]
    fn cluster_count_reduced_for_small_periods() {
        let preds = id_map(&seq_ids(10), &(0..10).map(|i| i as f64).collect::<Vec<_>>());
        let (plan, clusters) = abs_plan(&preds, &params(Smoothing::Logistic, 1.0, 10, 0.0), 4, 0).unwrap();
        assert_eq!(clusters.cluster_count(), 2);
        assert!((plan.probs().values().sum::<f64>() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_params_rejected() {
        let preds = id_map(&seq_ids(4), &[0.1, 0.2, 0.3, 0.4]);
        let mut p = params(Smoothing::Logistic, 1.0, 2, 0.0);
        p.trim = 0.6;
        assert!(abs_plan(&preds, &p, 1, 0).is_err());
        p.trim = 0.0;
        p.greedy_fraction = 1.0;
        assert!(abs_plan(&preds, &p, 1, 0).is_err());
    }
}
