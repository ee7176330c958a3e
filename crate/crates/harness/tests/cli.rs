use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use popest_harness::config::Config;
use popest_harness::experiment::{
    aggregate, read_aggregates, read_draws, run_experiment, write_aggregates, AGGREGATE_FILE, DRAWS_FILE, INIT_PARAM,
    SWEEP_FILE,
};
use tempfile::TempDir;

fn popest() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_popest"));
    cmd.env_remove("POPEST_OUT");
    cmd
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    fs::write(&path, body).unwrap();
    path
}

fn status(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

const TWO_STRATEGIES: &str = r#"
seed = 11
reps = 4

[environment]
kind = "synthetic"
dim = 3
periods = 3
per_period = 200
weight_seed = 2
noise = { kind = "bernoulli" }

[budget]
fraction = 0.05

[[strategies]]
kind = "srs"

[[strategies]]
kind = "entropy"
betas = [0.3, 1.0]
"#;

#[test]
fn single_rep_single_period_writes_one_row() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"
seed = 1
reps = 1
[environment]
kind = "synthetic"
dim = 2
periods = 1
per_period = 100
weight_seed = 1
[budget]
size = 5
[[strategies]]
kind = "entropy"
betas = [1.0]
"#,
    );
    let out_dir = tmp.path().join("out");
    let out = popest().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(status(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let draws = read_draws(&out_dir.join(DRAWS_FILE)).unwrap();
    assert_eq!(draws.len(), 1);
    assert_eq!(draws[0].strategy, "srs");
    assert_eq!(draws[0].param, INIT_PARAM);
    assert_eq!(draws[0].k, 5);
    assert_eq!(read_aggregates(&out_dir.join(AGGREGATE_FILE)).unwrap().len(), 1);
}

#[test]
fn same_seed_same_bytes_and_seed_flag_changes_them() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TWO_STRATEGIES);
    let run = |name: &str, extra: &[&str]| {
        let dir = tmp.path().join(name);
        let out = popest().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&dir).args(extra).output().unwrap();
        assert_eq!(status(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(dir.join(DRAWS_FILE)).unwrap()
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    let c = run("c", &["--seed", "12"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn every_row_spends_the_resolved_budget() {
    let tmp = TempDir::new().unwrap();
    let cfg = Config::from_toml(TWO_STRATEGIES).unwrap();
    let out = run_experiment(&cfg, tmp.path(), 1).unwrap();
    // 3 periods: one init draw, then 3 variants in each of 2 periods.
    assert_eq!(out.draws.len(), 4 * (1 + 2 * 3));
    for row in &out.draws {
        assert_eq!(row.n, 200);
        assert_eq!(row.k, 10);
    }
}

#[test]
fn aggregates_recompute_from_draws() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TWO_STRATEGIES);
    let out = popest().args(["sweep", "--config"]).arg(&cfg).arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(status(&out), 0);
    let draws = read_draws(&tmp.path().join(DRAWS_FILE)).unwrap();
    let again = tmp.path().join("again.csv");
    write_aggregates(&again, &aggregate(&draws)).unwrap();
    assert_eq!(fs::read(&again).unwrap(), fs::read(tmp.path().join(AGGREGATE_FILE)).unwrap());
    assert!(tmp.path().join(SWEEP_FILE).exists());
}

#[test]
fn output_dir_falls_back_to_environment_variable() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TWO_STRATEGIES);
    let env_dir = tmp.path().join("from-env");
    let out = popest()
        .args(["run", "--config"])
        .arg(&cfg)
        .env("POPEST_OUT", &env_dir)
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(status(&out), 0);
    assert!(env_dir.join(DRAWS_FILE).exists());

    let flag_dir = tmp.path().join("from-flag");
    let out = popest()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&flag_dir)
        .env("POPEST_OUT", tmp.path().join("unused"))
        .output()
        .unwrap();
    assert_eq!(status(&out), 0);
    assert!(flag_dir.join(DRAWS_FILE).exists());
    assert!(!tmp.path().join("unused").exists());
}

#[test]
fn invalid_input_exits_one() {
    let tmp = TempDir::new().unwrap();
    let out = popest().args(["verify", "--suite", "nope"]).output().unwrap();
    assert_eq!(status(&out), 1);

    let bad = write_config(tmp.path(), &TWO_STRATEGIES.replace("weight_seed = 2", "weight_seed = 2\nwieght = 3"));
    let out = popest().args(["run", "--config"]).arg(&bad).arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(status(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("wieght"));

    let out = popest().args(["run"]).output().unwrap();
    assert_eq!(status(&out), 1);
}

#[test]
fn verify_prints_and_writes_report() {
    let tmp = TempDir::new().unwrap();
    let out = popest().args(["verify", "--suite", "appendixC", "--out"]).arg(tmp.path()).output().unwrap();
    assert_eq!(status(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(printed, saved);
    assert_eq!(printed["passed"], true);
    assert!(!printed["checks"].as_array().unwrap().is_empty());
}

#[test]
fn plot_draws_one_series_per_strategy() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TWO_STRATEGIES);
    let out = popest().args(["run", "--config"]).arg(&cfg).arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(status(&out), 0);
    let csv = tmp.path().join(AGGREGATE_FILE);
    let out = popest().args(["plot", "--kind", "reward-variance"]).arg(&csv).output().unwrap();
    assert_eq!(status(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let svg = fs::read_to_string(tmp.path().join("aggregate-reward-variance.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert_eq!(svg.matches(r#"<polyline class="series""#).count(), 2);
    assert!(svg.contains(r#"data-strategy="srs""#));
    assert!(svg.contains(r#"data-strategy="entropy""#));
    assert_eq!(svg.matches(r#"class="legend""#).count(), 2);
}

#[test]
fn plot_inclusion_check_from_verify_output() {
    let tmp = TempDir::new().unwrap();
    let out = popest().args(["verify", "--suite", "pareto", "--out"]).arg(tmp.path()).output().unwrap();
    assert!(matches!(status(&out), 0 | 2));
    let svg_path = tmp.path().join("inc.svg");
    let out = popest()
        .args(["plot", "--kind", "inclusion-check", "--out"])
        .arg(&svg_path)
        .arg(tmp.path().join("inclusion.csv"))
        .output()
        .unwrap();
    assert_eq!(status(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let svg = fs::read_to_string(svg_path).unwrap();
    assert_eq!(svg.matches(r#"class="identity""#).count(), 1);
    assert!(svg.matches(r#"class="point""#).count() > 10);
}

#[test]
fn plot_empty_table_and_wrong_schema() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "id,target,empirical\n").unwrap();
    let out = popest().args(["plot", "--kind", "inclusion-check"]).arg(&empty).output().unwrap();
    assert_eq!(status(&out), 0);
    assert!(fs::read_to_string(tmp.path().join("empty-inclusion-check.svg")).unwrap().contains("no data"));

    let wrong = tmp.path().join("wrong.csv");
    fs::write(&wrong, "a,b\n1,2\n").unwrap();
    let out = popest().args(["plot", "--kind", "reward-variance"]).arg(&wrong).output().unwrap();
    assert_eq!(status(&out), 1);
}

/// Noiseless rewards under SRS: the empirical IPW variance tracks
/// `N^2 (1 - K/N) S^2 / K`.
#[test]
fn srs_ipw_variance_matches_closed_form() {
    let tmp = TempDir::new().unwrap();
    let cfg = Config::from_toml(
        r#"
seed = 3
reps = 4000
[environment]
kind = "synthetic"
dim = 2
periods = 2
per_period = 20
weight_seed = 4
weight_scale = 2.0
[budget]
size = 4
[[strategies]]
kind = "srs"
"#,
    )
    .unwrap();
    let periods = cfg.periods().unwrap();
    let y: Vec<f64> = periods[1].mean_rewards().values().copied().collect();
    let (n, k) = (y.len() as f64, 4.0);
    let mean = y.iter().sum::<f64>() / n;
    let s2 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let exact = n * n * (1.0 - k / n) * s2 / k;

    let out = run_experiment(&cfg, tmp.path(), 1).unwrap();
    let row = out.aggregates.iter().find(|r| r.period == 1).unwrap();
    assert!(row.bias_ipw.abs() < 4.0 * (exact / 4000.0).sqrt(), "bias {}", row.bias_ipw);
    // Kurtosis of a 4-of-20 total is mild; 5 sd of the sample variance is generous.
    let sd = exact * (2.0 / 3999.0_f64).sqrt();
    assert!((row.var_ipw - exact).abs() < 5.0 * sd, "var {} vs {exact}", row.var_ipw);
}
