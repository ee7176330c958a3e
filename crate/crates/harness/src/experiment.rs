//! The repeated-period protocol and its CSV outputs.
//!
//! Each repetition draws period 0 by simple random sampling, shared by all
//! strategies. Every strategy variant then runs its own trajectory: fit the
//! model on everything it has selected so far, plan, draw, estimate.
//!
//! Random streams are keyed by `(seed, rep, period)`, so realized rewards and
//! Pareto uniforms are common to all strategies within a repetition and the
//! output does not depend on the number of worker threads.

use std::fs;
use std::path::{Path, PathBuf};

use popest::design::{srs_plan, Strategy};
use popest::estimators::estimate_all;
use popest::model::{constant_predictions, fit, predict_clamped, TrainingSet};
use popest::rng::{derive_seed, tag};
use popest::sampler::{draw_pareto, draw_sequential, draw_two_stage};
use popest::types::{realize_rewards, InclusionPlan, SampleDraw};
use popest::{IdMap, Period, StrategyTag};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::error::{HarnessError, Result};

pub const DRAWS_FILE: &str = "draws.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const METADATA_FILE: &str = "metadata.json";

pub const DRAW_COLUMNS: [&str; 11] = [
    "rep", "period", "strategy", "param", "K", "N", "reward", "pop_true", "est_model", "est_ipw", "est_dr",
];
pub const AGGREGATE_COLUMNS: [&str; 12] = [
    "strategy",
    "param",
    "period",
    "mean_reward",
    "reward_ci95",
    "var_model",
    "var_ipw",
    "var_dr",
    "bias_model",
    "bias_ipw",
    "bias_dr",
    "n_reps",
];

/// Label of the shared first-period draw.
pub const INIT_PARAM: &str = "init";

const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq)]
pub struct DrawRow {
    pub rep: usize,
    pub period: usize,
    pub strategy: String,
    pub param: String,
    pub k: usize,
    pub n: usize,
    pub reward: f64,
    pub pop_true: f64,
    pub est_model: f64,
    pub est_ipw: f64,
    pub est_dr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub strategy: String,
    pub param: String,
    pub period: usize,
    pub mean_reward: f64,
    pub reward_ci95: f64,
    pub var_model: f64,
    pub var_ipw: f64,
    pub var_dr: f64,
    pub bias_model: f64,
    pub bias_ipw: f64,
    pub bias_dr: f64,
    pub n_reps: usize,
}

pub fn param_label(param: Option<f64>) -> String {
    param.map(|v| v.to_string()).unwrap_or_default()
}

fn seeds(master: u64, rep: usize, period: usize) -> (u64, u64, u64) {
    let base = [rep as u64, period as u64];
    let with = |label: &str| derive_seed(master, &[base[0], base[1], tag(label)]);
    (with("reward"), with("draw"), with("abs"))
}

fn draw_plan(plan: &InclusionPlan, seed: u64) -> Result<SampleDraw> {
    let draw = if plan.budget() == 1 {
        draw_sequential(plan, seed)?
    } else {
        draw_pareto(plan, seed)?
    };
    Ok(draw)
}

fn row(rep: usize, period: &Period, tag: &StrategyTag, param: String, draw: &SampleDraw, preds: &IdMap) -> Result<DrawRow> {
    let est = estimate_all(draw, preds, period.pop_true())?;
    Ok(DrawRow {
        rep,
        period: period.index(),
        strategy: tag.name.clone(),
        param,
        k: period.budget(),
        n: period.len(),
        reward: est.reward_realized,
        pop_true: est.pop_true,
        est_model: est.est_model,
        est_ipw: est.est_ipw,
        est_dr: est.est_dr,
    })
}

/// All draws of one repetition, period-major then in variant order.
pub fn run_rep(cfg: &Config, periods: &[Period], variants: &[Strategy], rep: usize) -> Result<Vec<DrawRow>> {
    let first = periods
        .first()
        .ok_or_else(|| HarnessError::Config("environment: produced no periods".into()))?;
    let (reward_seed, draw_seed, _) = seeds(cfg.seed, rep, 0);
    let realized = realize_rewards(first, reward_seed);
    let init_tag = StrategyTag::new("srs", None);
    let plan = srs_plan(first)?.with_tag(init_tag.clone());
    let init = draw_plan(&plan, draw_seed)?.observe(&realized)?;
    let mean = init.realized_total() / init.selected().len() as f64;
    let flat = constant_predictions(first.observations(), mean);
    let mut rows = vec![row(rep, first, &init_tag, INIT_PARAM.into(), &init, &flat)?];

    let mut base = TrainingSet::new();
    base.extend_from(first.observations(), init.rewards())?;
    let mut training: Vec<TrainingSet> = vec![base; variants.len()];

    for period in &periods[1..] {
        let (reward_seed, draw_seed, abs_seed) = seeds(cfg.seed, rep, period.index());
        let realized = realize_rewards(period, reward_seed);
        for (strategy, data) in variants.iter().zip(training.iter_mut()) {
            let model = fit(&cfg.model, data)?;
            let preds = predict_clamped(&model, period.observations(), cfg.prediction_floor)?;
            let (plan, clusters) = strategy.plan(period, &preds, abs_seed)?;
            let draw = match &clusters {
                Some(bins) => draw_two_stage(&plan, bins, draw_seed)?,
                None => draw_plan(&plan, draw_seed)?,
            }
            .observe(&realized)?;
            rows.push(row(rep, period, &strategy.tag(), param_label(strategy.param()), &draw, &preds)?);
            data.extend_from(period.observations(), draw.rewards())?;
        }
    }
    Ok(rows)
}

/// Every repetition, run on `jobs` worker threads and collected in order.
pub fn run_draws(cfg: &Config, jobs: usize) -> Result<Vec<DrawRow>> {
    let periods = cfg.periods()?;
    let variants = cfg.variants();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Io(format!("thread pool: {e}")))?;
    let per_rep: Vec<Vec<DrawRow>> = pool.install(|| {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| run_rep(cfg, &periods, &variants, rep))
            .collect::<Result<_>>()
    })?;
    Ok(per_rep.into_iter().flatten().collect())
}

#[derive(Default)]
struct Acc {
    n: usize,
    reward: Vec<f64>,
    est: [Vec<f64>; 3],
    err: [f64; 3],
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with the `n - 1` denominator; zero for a single value.
fn sample_var(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Fold per-draw rows into one row per (strategy, param, period), in order of
/// first appearance.
pub fn aggregate(rows: &[DrawRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, String, usize)> = Vec::new();
    let mut accs: Vec<Acc> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for r in rows {
        let key = (r.strategy.clone(), r.param.clone(), r.period);
        let i = *index.entry(key.clone()).or_insert_with(|| {
            keys.push(key);
            accs.push(Acc::default());
            accs.len() - 1
        });
        let a = &mut accs[i];
        a.n += 1;
        a.reward.push(r.reward);
        for (j, e) in [r.est_model, r.est_ipw, r.est_dr].into_iter().enumerate() {
            a.est[j].push(e);
            a.err[j] += e - r.pop_true;
        }
    }
    keys.into_iter()
        .zip(accs)
        .map(|((strategy, param, period), a)| {
            let n = a.n as f64;
            AggregateRow {
                strategy,
                param,
                period,
                mean_reward: mean(&a.reward),
                reward_ci95: Z95 * (sample_var(&a.reward) / n).sqrt(),
                var_model: sample_var(&a.est[0]),
                var_ipw: sample_var(&a.est[1]),
                var_dr: sample_var(&a.est[2]),
                bias_model: a.err[0] / n,
                bias_ipw: a.err[1] / n,
                bias_dr: a.err[2] / n,
                n_reps: a.n,
            }
        })
        .collect()
}

/// Rows of the last period only (the headline table).
pub fn final_period(rows: &[AggregateRow]) -> Vec<AggregateRow> {
    let last = rows.iter().map(|r| r.period).max().unwrap_or(0);
    rows.iter().filter(|r| r.period == last).cloned().collect()
}

fn fmt(v: f64) -> String {
    v.to_string()
}

pub fn write_draws(path: &Path, rows: &[DrawRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DRAW_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.rep.to_string(),
            r.period.to_string(),
            r.strategy.clone(),
            r.param.clone(),
            r.k.to_string(),
            r.n.to_string(),
            fmt(r.reward),
            fmt(r.pop_true),
            fmt(r.est_model),
            fmt(r.est_ipw),
            fmt(r.est_dr),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregates(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(AGGREGATE_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            r.param.clone(),
            r.period.to_string(),
            fmt(r.mean_reward),
            fmt(r.reward_ci95),
            fmt(r.var_model),
            fmt(r.var_ipw),
            fmt(r.var_dr),
            fmt(r.bias_model),
            fmt(r.bias_ipw),
            fmt(r.bias_dr),
            r.n_reps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn header_check(path: &Path, found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if found.iter().eq(expected.iter().copied()) {
        Ok(())
    } else {
        Err(HarnessError::Schema(format!(
            "{}: header {:?}, expected {:?}",
            path.display(),
            found.iter().collect::<Vec<_>>(),
            expected
        )))
    }
}

pub(crate) fn parse<T: std::str::FromStr>(path: &Path, line: usize, column: &str, cell: &str) -> Result<T> {
    cell.parse().map_err(|_| {
        HarnessError::Schema(format!("{}: row {line}, column `{column}`: cannot parse {cell:?}", path.display()))
    })
}

pub fn read_draws(path: &Path) -> Result<Vec<DrawRow>> {
    let mut r = csv::Reader::from_path(path)?;
    header_check(path, r.headers()?, &DRAW_COLUMNS)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let f = |c: usize| rec.get(c).unwrap_or("");
        rows.push(DrawRow {
            rep: parse(path, line, "rep", f(0))?,
            period: parse(path, line, "period", f(1))?,
            strategy: f(2).to_string(),
            param: f(3).to_string(),
            k: parse(path, line, "K", f(4))?,
            n: parse(path, line, "N", f(5))?,
            reward: parse(path, line, "reward", f(6))?,
            pop_true: parse(path, line, "pop_true", f(7))?,
            est_model: parse(path, line, "est_model", f(8))?,
            est_ipw: parse(path, line, "est_ipw", f(9))?,
            est_dr: parse(path, line, "est_dr", f(10))?,
        });
    }
    Ok(rows)
}

/// Reads an aggregate or sweep table. Sweep tables lack the period column and
/// are read as period 0.
pub fn read_aggregates(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let with_period = headers.iter().eq(AGGREGATE_COLUMNS.iter().copied());
    if !with_period {
        header_check(path, &headers, &sweep_columns())?;
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let cells: Vec<&str> = if with_period {
            rec.iter().collect()
        } else {
            let mut c: Vec<&str> = rec.iter().collect();
            c.insert(2, "0");
            c
        };
        let num = |c: usize| parse::<f64>(path, line, AGGREGATE_COLUMNS[c], cells[c]);
        rows.push(AggregateRow {
            strategy: cells[0].to_string(),
            param: cells[1].to_string(),
            period: parse(path, line, "period", cells[2])?,
            mean_reward: num(3)?,
            reward_ci95: num(4)?,
            var_model: num(5)?,
            var_ipw: num(6)?,
            var_dr: num(7)?,
            bias_model: num(8)?,
            bias_ipw: num(9)?,
            bias_dr: num(10)?,
            n_reps: parse(path, line, "n_reps", cells[11])?,
        });
    }
    Ok(rows)
}

pub fn sweep_columns() -> Vec<&'static str> {
    AGGREGATE_COLUMNS.iter().copied().filter(|&c| c != "period").collect()
}

/// One row per (strategy, param) from the final period.
pub fn write_sweep(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(sweep_columns())?;
    for r in final_period(rows) {
        w.write_record([
            r.strategy.clone(),
            r.param.clone(),
            fmt(r.mean_reward),
            fmt(r.reward_ci95),
            fmt(r.var_model),
            fmt(r.var_ipw),
            fmt(r.var_dr),
            fmt(r.bias_model),
            fmt(r.bias_ipw),
            fmt(r.bias_dr),
            r.n_reps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Metadata<'a> {
    seed: u64,
    reps: usize,
    draw_rows: usize,
    config: &'a Config,
}

#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub draws: Vec<DrawRow>,
    pub aggregates: Vec<AggregateRow>,
}

/// Runs the protocol and writes the per-draw table, the aggregate table and
/// run metadata into `dir`.
pub fn run_experiment(cfg: &Config, dir: &Path, jobs: usize) -> Result<RunOutput> {
    let draws = run_draws(cfg, jobs)?;
    let aggregates = aggregate(&draws);
    fs::create_dir_all(dir)?;
    write_draws(&dir.join(DRAWS_FILE), &draws)?;
    write_aggregates(&dir.join(AGGREGATE_FILE), &aggregates)?;
    let meta = Metadata {
        seed: cfg.seed,
        reps: cfg.reps,
        draw_rows: draws.len(),
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| HarnessError::Io(e.to_string()))?;
    fs::write(dir.join(METADATA_FILE), json + "\n")?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        draws,
        aggregates,
    })
}

/// [`run_experiment`] plus the final-period reward/variance table.
pub fn sweep(cfg: &Config, dir: &Path, jobs: usize) -> Result<RunOutput> {
    let out = run_experiment(cfg, dir, jobs)?;
    write_sweep(&dir.join(SWEEP_FILE), &out.aggregates)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draw(rep: usize, reward: f64, ipw: f64) -> DrawRow {
        DrawRow {
            rep,
            period: 1,
            strategy: "entropy".into(),
            param: "0.5".into(),
            k: 2,
            n: 10,
            reward,
            pop_true: 3.0,
            est_model: 3.0,
            est_ipw: ipw,
            est_dr: 3.0,
        }
    }

    #[test]
    fn aggregate_statistics() {
        let rows = [draw(0, 1.0, 2.0), draw(1, 2.0, 4.0), draw(2, 3.0, 6.0)];
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 1);
        let a = &agg[0];
        assert_eq!(a.n_reps, 3);
        assert_eq!(a.mean_reward, 2.0);
        assert!((a.reward_ci95 - Z95 * (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(a.var_ipw, 4.0);
        assert_eq!(a.var_model, 0.0);
        assert!((a.bias_ipw - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_rep_has_zero_spread() {
        let agg = aggregate(&[draw(0, 1.0, 2.0)]);
        assert_eq!((agg[0].reward_ci95, agg[0].var_ipw), (0.0, 0.0));
    }

    #[test]
    fn draws_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let rows = vec![draw(0, 0.1 + 0.2, 1.0 / 3.0), draw(1, 2.0, 4.0)];
        write_draws(&path, &rows).unwrap();
        assert_eq!(read_draws(&path).unwrap(), rows);
    }

    #[test]
    fn wrong_header_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_draws(&path), Err(HarnessError::Schema(_))));
        assert!(matches!(read_aggregates(&path), Err(HarnessError::Schema(_))));
    }
}
