//! Command line front end: single runs, Monte Carlo ensembles, parameter
//! sweeps and accident-log analysis.
//!
//! All randomness is derived from `(seed, run index)`, so repeating an
//! invocation with the same configuration and seed reproduces every output
//! file byte for byte. Failures print a machine-readable JSON error record
//! on stderr and exit nonzero.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use roadhawk::analysis::{
    fit_exponential, gap_histogram, ks_critical_1pct, ks_statistic_exponential, read_samples_csv,
    DayFilter, EventLog,
};
use roadhawk::config::{load_experiment, ExperimentConfig};
use roadhawk::report;
use roadhawk::sim::{aggregate, run_monte_carlo, simulate, sweep};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "roadhawk", version, about = "Traffic network simulator with self-exciting accidents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write report, accident log and snapshots.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Master seed, overrides the configuration file.
        #[arg(long)]
        seed: Option<u64>,
        /// RNG stream (the run index within an ensemble).
        #[arg(long, default_value_t = 0)]
        stream: u64,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Density snapshot times, comma separated; overrides the config.
        #[arg(long, value_delimiter = ',')]
        snapshots: Option<Vec<f64>>,
    },
    /// Run a Monte Carlo ensemble and write per-run and aggregate results.
    Mc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of runs, overrides the configuration file.
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo over the configured distribution-share grids.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Runs per grid cell, overrides the configuration file.
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit an exponential law to a CSV column of positive samples.
    Fit {
        #[arg(long)]
        input: PathBuf,
        /// Column name holding the samples.
        #[arg(long, default_value = "value")]
        column: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analyze an accident log: intermediate times, exponential fit and
    /// hourly profile.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        /// Histogram bin width: minutes for wall-clock logs, time units for
        /// simulation logs.
        #[arg(long, default_value_t = 2.0)]
        bin_width: f64,
        #[arg(long, value_enum, default_value_t = DayFilterArg::All)]
        day_filter: DayFilterArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DayFilterArg {
    All,
    Weekdays,
    Saturday,
    Sunday,
}

impl From<DayFilterArg> for DayFilter {
    fn from(value: DayFilterArg) -> Self {
        match value {
            DayFilterArg::All => DayFilter::All,
            DayFilterArg::Weekdays => DayFilter::Weekdays,
            DayFilterArg::Saturday => DayFilter::Saturday,
            DayFilterArg::Sunday => DayFilter::Sunday,
        }
    }
}

fn main() {
    if let Err(err) = run() {
        let record = serde_json::json!({
            "error": {
                "message": format!("{err:#}"),
            }
        });
        eprintln!("{record}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate {
            config,
            seed,
            stream,
            out,
            snapshots,
        } => {
            let mut cfg = load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(snapshots) = snapshots {
                cfg.snapshots = snapshots;
                cfg.snapshots.sort_by(f64::total_cmp);
                cfg.snapshots.dedup();
            }
            let dir = out_dir(out.as_deref(), &cfg)?;
            let run = simulate(&cfg, stream)?;

            let net = &cfg.network;
            report::write_accident_log(writer(&dir, "accidents.csv")?, net, &run.log)?;
            report::write_runs_csv(writer(&dir, "runs.csv")?, net, &[run.report.clone()])?;
            let agg = aggregate(std::slice::from_ref(&run.report), &cfg.toes_times);
            report::write_aggregate_json(writer(&dir, "report.json")?, net, cfg.seed, &agg)?;
            if !run.snapshots.is_empty() {
                report::write_snapshots_csv(writer(&dir, "snapshots.csv")?, net, &run.snapshots)?;
            }
            if let Some(trace) = &run.report.cm_trace {
                report::write_cm_csv(writer(&dir, "cm.csv")?, net, trace)?;
            }
            println!(
                "run complete: ttt = {:.4}, accidents = {}, toes = {}",
                run.report.ttt,
                run.report.total_accidents,
                run.report
                    .toes
                    .map(|t| format!("{t:.2}"))
                    .unwrap_or_else(|| "none".into()),
            );
        }
        Command::Mc {
            config,
            seed,
            runs,
            out,
        } => {
            let mut cfg = load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(runs) = runs {
                anyhow::ensure!(runs >= 1, "runs must be at least 1");
                cfg.runs = runs;
            }
            let dir = out_dir(out.as_deref(), &cfg)?;
            let mc = run_monte_carlo(&cfg)?;
            report::write_runs_csv(writer(&dir, "runs.csv")?, &cfg.network, &mc.reports)?;
            report::write_aggregate_json(
                writer(&dir, "aggregate.json")?,
                &cfg.network,
                cfg.seed,
                &mc.aggregate,
            )?;
            report::write_road_means_csv(
                writer(&dir, "road_accidents.csv")?,
                &cfg.network,
                &mc.aggregate,
            )?;
            println!(
                "{} runs: mean ttt = {:.4} ± {:.4}, mean accidents = {:.3}",
                mc.aggregate.runs,
                mc.aggregate.ttt_mean,
                mc.aggregate.ttt_std_err,
                mc.aggregate.accidents_mean,
            );
        }
        Command::Sweep {
            config,
            seed,
            runs,
            out,
        } => {
            let mut cfg = load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(runs) = runs {
                anyhow::ensure!(runs >= 1, "runs must be at least 1");
                cfg.runs = runs;
            }
            anyhow::ensure!(
                cfg.sweep.is_some(),
                "configuration has no [experiment.sweep] grids"
            );
            let dir = out_dir(out.as_deref(), &cfg)?;
            let result = sweep(&cfg)?;
            report::write_sweep_csv(writer(&dir, "sweep.csv")?, &result)?;
            let best = result
                .rows
                .iter()
                .min_by(|a, b| a.aggregate.ttt_mean.total_cmp(&b.aggregate.ttt_mean))
                .expect("sweep grids are nonempty");
            println!(
                "{} cells: lowest mean ttt {:.4} at shares ({}, {})",
                result.rows.len(),
                best.aggregate.ttt_mean,
                best.share1,
                best.share2,
            );
        }
        Command::Fit { input, column, out } => {
            let file = File::open(&input).with_context(|| format!("open {}", input.display()))?;
            let samples = read_samples_csv(file, &column)?;
            let rate = fit_exponential(&samples)?;
            let ks = ks_statistic_exponential(&samples, rate);
            let critical = ks_critical_1pct(samples.len());
            let dir = ensure_dir(out.as_deref().unwrap_or_else(|| Path::new("out")))?;
            report::write_fit_json(writer(&dir, "fit.json")?, samples.len(), rate, ks, critical)?;
            println!(
                "n = {}, rate = {:.6}, KS = {:.5} (1% critical {:.5})",
                samples.len(),
                rate,
                ks,
                critical
            );
        }
        Command::Analyze {
            input,
            bin_width,
            day_filter,
            out,
        } => {
            let file = File::open(&input).with_context(|| format!("open {}", input.display()))?;
            let log = EventLog::from_csv(file)?;
            let dir = ensure_dir(out.as_deref().unwrap_or_else(|| Path::new("out")))?;

            let gaps = log.intermediate_times()?;
            let histogram = gap_histogram(&gaps, bin_width)?;
            report::write_histogram_csv(writer(&dir, "gaps_histogram.csv")?, &histogram)?;
            let ks = ks_statistic_exponential(&gaps, histogram.rate);
            let critical = ks_critical_1pct(gaps.len());
            report::write_fit_json(writer(&dir, "fit.json")?, gaps.len(), histogram.rate, ks, critical)?;

            match log.hourly_profile(day_filter.into()) {
                Ok(shares) => {
                    report::write_hourly_csv(writer(&dir, "hourly.csv")?, &shares)?;
                }
                Err(roadhawk::analysis::AnalysisError::NoWallClock) => {
                    // simulation logs have no day-of-week structure
                }
                Err(e) => return Err(e.into()),
            }
            println!(
                "{} events, {} gaps, fitted rate {:.6}, KS = {:.5} (1% critical {:.5})",
                log.len(),
                gaps.len(),
                histogram.rate,
                ks,
                critical
            );
        }
    }
    Ok(())
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    load_experiment(path).with_context(|| format!("load {}", path.display()))
}

fn out_dir(cli: Option<&Path>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cli
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    ensure_dir(&dir)
}

fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))?;
    Ok(dir.to_path_buf())
}

fn writer(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("create {}", path.display()))?;
    Ok(BufWriter::new(file))
}
