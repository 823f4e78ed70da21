//! Command-line front end: data generation, single join runs, epsilon
//! sweeps, model fitting and optimization.
//!
//! Machine-readable output (JSON for single runs, CSV for sweeps) goes to
//! stdout or files; diagnostics go to stderr. Exit codes: 0 success,
//! 2 usage error, 1 runtime error.

use bloomjoin::bench::{
    default_epsilon_grid, emit_report, fit_and_optimize, load_results_csv, run_sweep,
    write_results_csv, SweepConfig,
};
use bloomjoin::costmodel::{solve_optimal_epsilon, ModelDocument, SolveMethod};
use bloomjoin::data::{generate, load_csv, write_csv, GenConfig, PartitionedTable, Schema};
use bloomjoin::engine::{
    baseline_broadcast_hash_join, baseline_shuffle_join, bloom_cascade_join, JoinConfig,
    RunOutcome,
};
use bloomjoin::error::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Duration;

#[derive(Parser)]
#[command(name = "bloomjoin", version, about = "Bloom-filtered cascade join engine")]
struct Cli {
    /// Base seed for data generation, hashing and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for the engine pool (0 = all cores). Falls back to
    /// the BLOOMJOIN_THREADS environment variable.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Default directory for file outputs when a subcommand's --out is
    /// omitted.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate orders.csv and lineitem.csv.
    Gen(GenArgs),
    /// Execute one join run and print its timings as JSON.
    Run(RunArgs),
    /// Run an epsilon sweep and write results.csv.
    Sweep(SweepArgs),
    /// Fit the cost models from a results.csv and write model.json.
    Fit(FitArgs),
    /// Solve for the optimal epsilon from a model.json.
    Optimize(OptimizeArgs),
    /// Fit models and write the full report (results.csv, model.json,
    /// plotdata.csv).
    Report(ReportArgs),
}

fn parse_epsilon(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("epsilon must lie in (0, 1], got {v}"))
    }
}

fn parse_selectivity(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("selectivity must lie in (0, 1], got {v}"))
    }
}

#[derive(Args)]
struct GenArgs {
    /// TPC-H-style scale factor (orders rows = scale * 1.5M).
    #[arg(long)]
    scale: f64,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Algorithm {
    Cascade,
    Shuffle,
    Broadcast,
}

#[derive(Args)]
struct RunArgs {
    /// Big-table CSV (lineitem).
    #[arg(long)]
    big: PathBuf,
    /// Small-table CSV (orders).
    #[arg(long)]
    small: PathBuf,
    /// Target Bloom false-positive rate.
    #[arg(long, value_parser = parse_epsilon, default_value_t = 0.01)]
    epsilon: f64,
    /// Shuffle partition count.
    #[arg(long, default_value_t = 200)]
    partitions: usize,
    #[arg(long, value_enum, default_value_t = Algorithm::Cascade)]
    algorithm: Algorithm,
    /// condition1 selectivity on the big table.
    #[arg(long, value_parser = parse_selectivity, default_value_t = 1.0)]
    sel_big: f64,
    /// condition2 selectivity on the small table.
    #[arg(long, value_parser = parse_selectivity, default_value_t = 1.0)]
    sel_small: f64,
    /// Approximate-count budget in milliseconds.
    #[arg(long, default_value_t = 50)]
    count_budget_ms: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated epsilon grid; defaults to 23 log-spaced points over
    /// [1e-4, 0.5].
    #[arg(long, value_delimiter = ',', value_parser = parse_epsilon)]
    epsilons: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0.01)]
    scale: f64,
    #[arg(long, default_value_t = 200)]
    partitions: usize,
    #[arg(long, default_value_t = 8)]
    input_partitions: usize,
    #[arg(long, value_parser = parse_selectivity, default_value_t = 1.0)]
    sel_big: f64,
    #[arg(long, value_parser = parse_selectivity, default_value_t = 1.0)]
    sel_small: f64,
    /// Also time the shuffle and broadcast-hash baselines per point.
    #[arg(long)]
    baselines: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// results.csv from a sweep.
    #[arg(long)]
    results: PathBuf,
    /// Output model.json path; defaults to model.json next to the results.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    /// model.json from `fit` or `report`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunReport {
    algorithm: String,
    epsilon: f64,
    partitions: usize,
    result_rows: u64,
    filtered_kept: u64,
    filtered_dropped: u64,
    bytes_broadcast: u64,
    m_bits: u64,
    filter_bytes: u64,
    t_count_ms: f64,
    t_bloom_build_ms: f64,
    t_broadcast_ms: f64,
    t_filter_join_ms: f64,
}

#[derive(Serialize)]
struct OptimizeReport {
    epsilon_star: f64,
    method: SolveMethod,
    residual: f64,
    iterations: u32,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

/// Resolves a subcommand --out against the global --output-dir; neither
/// present is a usage error (exit 2).
fn resolve_out(sub: Option<PathBuf>, global: &Option<PathBuf>, flag: &str) -> PathBuf {
    match sub.or_else(|| global.clone()) {
        Some(p) => p,
        None => {
            eprintln!("error: missing required {flag} (or global --output-dir)");
            std::process::exit(2);
        }
    }
}

fn threads_from(cli: &Cli) -> usize {
    cli.threads
        .or_else(|| {
            std::env::var("BLOOMJOIN_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0)
}

/// Loads a table trying the preferred schemas in order, so files from
/// `gen` and hand-written generic CSVs both work.
fn load_table(path: &Path, preferred: &[Schema]) -> Result<PartitionedTable> {
    let mut last = None;
    for &schema in preferred {
        match load_csv(path, schema) {
            Ok(t) => return Ok(t),
            Err(e @ Error::Schema(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Schema("no schema matched".into())))
}

fn dispatch(cli: Cli) -> Result<()> {
    let threads = threads_from(&cli);
    match cli.command {
        Command::Gen(args) => {
            let out = resolve_out(args.out.clone(), &cli.output_dir, "--out");
            let config = GenConfig {
                scale_factor: args.scale,
                seed: cli.seed,
                ..GenConfig::default()
            };
            let (orders, lineitem) = generate(&config)?;
            std::fs::create_dir_all(&out)?;
            write_csv(&orders, &out.join("orders.csv"))?;
            write_csv(&lineitem, &out.join("lineitem.csv"))?;
            eprintln!(
                "wrote {} orders rows and {} lineitem rows to {}",
                orders.num_rows(),
                lineitem.num_rows(),
                out.display()
            );
            Ok(())
        }
        Command::Run(args) => {
            let big = load_table(&args.big, &[Schema::Lineitem, Schema::Orders, Schema::Generic])?;
            let small = load_table(&args.small, &[Schema::Orders, Schema::Lineitem, Schema::Generic])?;
            let config = JoinConfig {
                epsilon: args.epsilon,
                shuffle_partitions: args.partitions,
                count_budget: Duration::from_millis(args.count_budget_ms),
                worker_threads: threads,
                seed: cli.seed,
                sel_big: args.sel_big,
                sel_small: args.sel_small,
                ..JoinConfig::default()
            };
            let run: RunOutcome = match args.algorithm {
                Algorithm::Cascade => bloom_cascade_join(&big, &small, &config)?,
                Algorithm::Shuffle => baseline_shuffle_join(&big, &small, &config)?,
                Algorithm::Broadcast => baseline_broadcast_hash_join(&big, &small, &config)?,
            };
            let t = &run.timings;
            let report = RunReport {
                algorithm: match args.algorithm {
                    Algorithm::Cascade => "cascade",
                    Algorithm::Shuffle => "shuffle",
                    Algorithm::Broadcast => "broadcast",
                }
                .to_string(),
                epsilon: args.epsilon,
                partitions: args.partitions,
                result_rows: t.result_rows,
                filtered_kept: t.filtered_kept,
                filtered_dropped: t.filtered_dropped,
                bytes_broadcast: t.bytes_broadcast,
                m_bits: run.m_bits,
                filter_bytes: run.filter_bytes,
                t_count_ms: t.t_count.as_secs_f64() * 1e3,
                t_bloom_build_ms: t.t_bloom_build.as_secs_f64() * 1e3,
                t_broadcast_ms: t.t_broadcast.as_secs_f64() * 1e3,
                t_filter_join_ms: t.t_filter_join.as_secs_f64() * 1e3,
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Sweep(args) => {
            let out = resolve_out(args.out.clone(), &cli.output_dir, "--out");
            let config = SweepConfig {
                epsilons: if args.epsilons.is_empty() {
                    default_epsilon_grid()
                } else {
                    args.epsilons.clone()
                },
                repetitions: args.reps,
                gen: GenConfig {
                    scale_factor: args.scale,
                    seed: cli.seed,
                    sel_big: args.sel_big,
                    sel_small: args.sel_small,
                    ..GenConfig::default()
                },
                join: JoinConfig {
                    shuffle_partitions: args.partitions,
                    worker_threads: threads,
                    seed: cli.seed,
                    ..JoinConfig::default()
                },
                include_baselines: args.baselines,
                input_partitions: args.input_partitions,
            };
            let results = run_sweep(&config)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("results.csv");
            write_results_csv(&results, &path)?;
            eprintln!("wrote {} results to {}", results.len(), path.display());
            Ok(())
        }
        Command::Fit(args) => {
            let results = load_results_csv(&args.results)?;
            let fit = fit_and_optimize(&results)?;
            let out = args.out.unwrap_or_else(|| {
                args.results
                    .parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join("model.json")
            });
            fit.document().save(&out)?;
            println!("{}", serde_json::to_string_pretty(&fit.document())?);
            Ok(())
        }
        Command::Optimize(args) => {
            let doc = ModelDocument::load(&args.model)?;
            let sol = solve_optimal_epsilon(&doc.bloom_eps(), &doc.join(), args.tol)?;
            let report = OptimizeReport {
                epsilon_star: sol.epsilon_star,
                method: sol.method,
                residual: sol.residual,
                iterations: sol.iterations,
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Report(args) => {
            let out = resolve_out(args.out.clone(), &cli.output_dir, "--out");
            let results = load_results_csv(&args.results)?;
            let fit = fit_and_optimize(&results)?;
            emit_report(&results, &fit, &out)?;
            let doc = fit.document();
            eprintln!(
                "report written to {}; epsilon* = {} ({})",
                out.display(),
                doc.epsilon_star.unwrap_or(f64::NAN),
                serde_json::to_string(&doc.method)?
            );
            Ok(())
        }
    }
}
