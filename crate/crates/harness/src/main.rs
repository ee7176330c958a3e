use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use popest_harness::config::Config;
use popest_harness::experiment::{run_experiment, sweep, RunOutput};
use popest_harness::plot::{plot_file, write_inclusion, PlotKind};
use popest_harness::suites::{run_suite, Suite};
use popest_harness::{HarnessError, Result};

const EXIT_INVALID: u8 = 1;
const EXIT_SUITE_FAILED: u8 = 2;

/// Optimize-and-estimate sampling simulator.
#[derive(Debug, Parser)]
#[command(name = "popest", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the multi-period protocol and write per-draw and aggregate CSVs.
    Run(RunArgs),
    /// As `run`, plus a final-period table over the parameter grid.
    Sweep(RunArgs),
    /// Run a named property suite and print a JSON report.
    Verify {
        /// pareto | estimators | bounds | prop1 | appendixC
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for report.json (and inclusion.csv for `pareto`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render an aggregate, sweep, or inclusion CSV as SVG.
    Plot {
        /// reward-variance | bias-vs-reward | inclusion-check
        #[arg(long)]
        kind: String,
        /// Output SVG path; defaults to `<csv stem>-<kind>.svg` beside the input.
        #[arg(long)]
        out: Option<PathBuf>,
        csv: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; falls back to the config, then $POPEST_OUT, then `popest-out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; output does not depend on this.
    #[arg(long)]
    jobs: Option<usize>,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn run(args: &RunArgs, with_sweep: bool) -> Result<RunOutput> {
    let mut cfg = Config::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let dir = cfg.resolve_output(args.out.as_deref());
    let jobs = args.jobs.unwrap_or_else(default_jobs).max(1);
    if with_sweep {
        sweep(&cfg, &dir, jobs)
    } else {
        run_experiment(&cfg, &dir, jobs)
    }
}

fn verify(suite: &str, seed: u64, out: Option<&Path>) -> Result<bool> {
    let suite: Suite = suite.parse()?;
    let report = run_suite(suite, seed)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| HarnessError::Io(e.to_string()))?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), format!("{json}\n"))?;
        if !report.inclusion.is_empty() {
            write_inclusion(&dir.join("inclusion.csv"), &report.inclusion)?;
        }
    }
    println!("{json}");
    Ok(report.passed)
}

fn plot(kind: &str, csv: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let kind: PlotKind = kind.parse()?;
    let svg = plot_file(csv, kind)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| {
        let stem = csv.file_stem().map_or("plot".into(), |s| s.to_string_lossy());
        csv.with_file_name(format!("{stem}-{}.svg", kind.name()))
    });
    std::fs::write(&path, svg)?;
    Ok(path)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INVALID) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match &cli.command {
        Command::Run(args) | Command::Sweep(args) => {
            run(args, matches!(cli.command, Command::Sweep(_))).map(|o| {
                eprintln!("wrote {} draw rows to {}", o.draws.len(), o.dir.display());
                true
            })
        }
        Command::Verify { suite, seed, out } => verify(suite, *seed, out.as_deref()),
        Command::Plot { kind, out, csv } => plot(kind, csv, out.as_deref()).map(|p| {
            eprintln!("wrote {}", p.display());
            true
        }),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_SUITE_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}
