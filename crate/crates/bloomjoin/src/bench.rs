//! Epsilon-sweep harness: runs the cascade join across an epsilon grid,
//! collects per-run results, drives model fitting and writes the report
//! files (results.csv, model.json, plotdata.csv).
//!
//! Runs execute sequentially so their timings do not contaminate each
//! other; parallelism lives inside each engine run. A warm-up run executes
//! and is discarded before the timed grid.

use crate::costmodel::{
    fit_bloom_model, fit_join_model, model_total, solve_optimal_epsilon, BloomTimeModel,
    BloomTimeModelEps, JoinTimeModel, ModelDocument, OptimalEpsilon,
};
use crate::data::{generate, partition, GenConfig, PartitionPolicy};
use crate::engine::{
    baseline_broadcast_hash_join, baseline_shuffle_join, bloom_cascade_join, n_filtrable,
    JoinConfig, RunOutcome,
};
use crate::error::{Error, Result};
use crate::hash::mix64;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Duration;

/// Oracle-side N_filtrable is skipped above this big-table row count.
const N_FILTRABLE_ROW_CAP: u64 = 1_000_000;

/// Default epsilon grid: 23 log-spaced points over [1e-4, 0.5].
pub fn default_epsilon_grid() -> Vec<f64> {
    log_spaced(1e-4, 0.5, 23)
}

pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    pub repetitions: usize,
    pub gen: GenConfig,
    pub join: JoinConfig,
    pub include_baselines: bool,
    /// Input partition count for both generated tables.
    pub input_partitions: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            epsilons: default_epsilon_grid(),
            repetitions: 3,
            gen: GenConfig::default(),
            join: JoinConfig::default(),
            include_baselines: false,
            input_partitions: 8,
        }
    }
}

/// One sweep point. Durations are milliseconds as f64 so the CSV round
/// trip is lossless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub epsilon: f64,
    pub rep: usize,
    pub seed: u64,
    pub t_count_ms: f64,
    pub t_bloom_build_ms: f64,
    pub t_broadcast_ms: f64,
    pub t_filter_join_ms: f64,
    pub bytes_broadcast: u64,
    pub filtered_kept: u64,
    pub filtered_dropped: u64,
    pub result_rows: u64,
    pub m_bits: u64,
    pub filter_bytes: u64,
    pub n_filtrable: Option<u64>,
    pub baseline_shuffle_ms: Option<f64>,
    pub baseline_broadcast_ms: Option<f64>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

impl ExperimentResult {
    fn from_run(
        epsilon: f64,
        rep: usize,
        seed: u64,
        run: &RunOutcome,
        n_filt: Option<u64>,
    ) -> Self {
        ExperimentResult {
            epsilon,
            rep,
            seed,
            t_count_ms: ms(run.timings.t_count),
            t_bloom_build_ms: ms(run.timings.t_bloom_build),
            t_broadcast_ms: ms(run.timings.t_broadcast),
            t_filter_join_ms: ms(run.timings.t_filter_join),
            bytes_broadcast: run.timings.bytes_broadcast,
            filtered_kept: run.timings.filtered_kept,
            filtered_dropped: run.timings.filtered_dropped,
            result_rows: run.timings.result_rows,
            m_bits: run.m_bits,
            filter_bytes: run.filter_bytes,
            n_filtrable: n_filt,
            baseline_shuffle_ms: None,
            baseline_broadcast_ms: None,
        }
    }
}

/// Generates the fixture once, then runs every (epsilon, repetition) pair
/// as an isolated engine run, in grid order.
pub fn run_sweep(config: &SweepConfig) -> Result<Vec<ExperimentResult>> {
    if config.epsilons.is_empty() {
        return Err(Error::InvalidArgument("epsilon grid must be nonempty".into()));
    }
    for &eps in &config.epsilons {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in (0, 1], got {eps}"
            )));
        }
    }
    if config.repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be >= 1".into()));
    }

    let (orders, lineitem) = generate(&config.gen)?;
    let small = partition(&orders, PartitionPolicy::ByCount(config.input_partitions))?;
    let big = partition(&lineitem, PartitionPolicy::ByCount(config.input_partitions))?;

    let mut template = config.join.clone();
    template.sel_big = config.gen.sel_big;
    template.sel_small = config.gen.sel_small;

    let n_filt = (big.num_rows() <= N_FILTRABLE_ROW_CAP)
        .then(|| n_filtrable(&big, &small, template.sel_big, template.sel_small));

    // Warm-up run, discarded, so the first timed run sees hot caches.
    let warmup = JoinConfig {
        epsilon: config.epsilons[0],
        seed: mix64(template.seed ^ 0x7761726d),
        ..template.clone()
    };
    bloom_cascade_join(&big, &small, &warmup)?;

    let mut results = Vec::with_capacity(config.epsilons.len() * config.repetitions);
    for (ei, &epsilon) in config.epsilons.iter().enumerate() {
        for rep in 0..config.repetitions {
            let run_index = (ei * config.repetitions + rep) as u64;
            let seed = mix64(template.seed ^ mix64(run_index + 1));
            let run_config = JoinConfig {
                epsilon,
                seed,
                ..template.clone()
            };
            let tag = |e: Error| Error::Sweep {
                epsilon,
                rep,
                message: e.to_string(),
            };
            let run = bloom_cascade_join(&big, &small, &run_config).map_err(tag)?;
            let mut result = ExperimentResult::from_run(epsilon, rep, seed, &run, n_filt);
            if config.include_baselines {
                let tag = |e: Error| Error::Sweep {
                    epsilon,
                    rep,
                    message: e.to_string(),
                };
                let sh = baseline_shuffle_join(&big, &small, &run_config).map_err(tag)?;
                let tag = |e: Error| Error::Sweep {
                    epsilon,
                    rep,
                    message: e.to_string(),
                };
                let bc = baseline_broadcast_hash_join(&big, &small, &run_config).map_err(tag)?;
                result.baseline_shuffle_ms = Some(ms(sh.timings.t_filter_join));
                result.baseline_broadcast_ms = Some(ms(bc.timings.t_filter_join));
            }
            results.push(result);
        }
    }
    Ok(results)
}

/// Fitted models plus the solved optimum for one sweep.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub bloom: BloomTimeModel,
    pub bloom_eps: BloomTimeModelEps,
    pub join: JoinTimeModel,
    pub optimum: OptimalEpsilon,
}

impl FitOutcome {
    pub fn document(&self) -> ModelDocument {
        ModelDocument::new(&self.bloom, &self.bloom_eps, &self.join, Some(&self.optimum))
    }
}

/// Fits the bloom-time model on (m_bits, build seconds), the join-time
/// model on (epsilon, filter+join seconds), converts to epsilon space and
/// solves for the optimal epsilon.
pub fn fit_and_optimize(results: &[ExperimentResult]) -> Result<FitOutcome> {
    let mut distinct: Vec<u64> = results.iter().map(|r| r.epsilon.to_bits()).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::Underdetermined(format!(
            "model fitting needs results at >= 4 distinct epsilon values, have {}; \
             extend the sweep grid",
            distinct.len()
        )));
    }

    let bloom_obs: Vec<(f64, f64)> = results
        .iter()
        .map(|r| (r.m_bits as f64, r.t_bloom_build_ms / 1e3))
        .collect();
    let join_obs: Vec<(f64, f64)> = results
        .iter()
        .map(|r| (r.epsilon, r.t_filter_join_ms / 1e3))
        .collect();

    let bloom = fit_bloom_model(&bloom_obs)?;
    let join = fit_join_model(&join_obs)?;

    // Recover the planned key count from the sizing relation so the
    // size-space fit converts exactly into epsilon space.
    let n_estimates: Vec<f64> = results
        .iter()
        .map(|r| r.m_bits as f64 / (1.44 * (1.0 / r.epsilon).log2()))
        .collect();
    let bloom_eps = bloom.to_eps_space(median(&n_estimates));

    let optimum = solve_optimal_epsilon(&bloom_eps, &join, 1e-10)?;
    Ok(FitOutcome {
        bloom,
        bloom_eps,
        join,
        optimum,
    })
}

pub fn write_results_csv(results: &[ExperimentResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in results {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_results_csv(path: &Path) -> Result<Vec<ExperimentResult>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Rows on the model curve plus the observed scatter, enough to redraw the
/// sweep figure externally.
#[derive(Debug, Serialize, Deserialize)]
struct PlotRow {
    kind: &'static str,
    epsilon: f64,
    bloom_seconds: f64,
    join_seconds: f64,
    total_seconds: f64,
}

/// Writes results.csv, model.json and plotdata.csv into `dir`. The plot
/// data holds the fitted curves on a 200-point log grid over the observed
/// epsilon range plus one row per observation.
pub fn emit_report(results: &[ExperimentResult], fit: &FitOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_results_csv(results, &dir.join("results.csv"))?;
    fit.document().save(&dir.join("model.json"))?;

    let lo = results.iter().map(|r| r.epsilon).fold(f64::INFINITY, f64::min);
    let hi = results.iter().map(|r| r.epsilon).fold(0.0f64, f64::max);
    let mut w = csv::Writer::from_path(dir.join("plotdata.csv"))?;
    for eps in log_spaced(lo, hi, 200) {
        let bloom = crate::costmodel::eval_bloom_model(&fit.bloom_eps, eps)?;
        let join = crate::costmodel::eval_join_model(&fit.join, eps)?;
        w.serialize(PlotRow {
            kind: "model",
            epsilon: eps,
            bloom_seconds: bloom,
            join_seconds: join,
            total_seconds: model_total(eps, &fit.bloom_eps, &fit.join)?,
        })?;
    }
    for r in results {
        let bloom = r.t_bloom_build_ms / 1e3;
        let join = r.t_filter_join_ms / 1e3;
        w.serialize(PlotRow {
            kind: "observed",
            epsilon: r.epsilon,
            bloom_seconds: bloom,
            join_seconds: join,
            total_seconds: bloom + join,
        })?;
    }
    w.flush()?;
    Ok(())
}
