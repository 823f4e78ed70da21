//! Five-step Bloom-filtered cascade join over partitioned tables, plus the
//! plain shuffle and broadcast-hash baselines and a nested-loop oracle.
//!
//! The cascade pipeline: approximate-count the small side, plan and build a
//! distributed Bloom filter over its keys, broadcast it, pre-filter the big
//! side with predicate + filter, then shuffle both sides by key and
//! sort-merge join each partition pair. Stages run as barriers; partition
//! tasks never share mutable state. Each of the four phases is timed once
//! around exactly one stage.

use crate::bloom::{self, BloomFilter, BloomParams};
use crate::data::{apply_predicate, PartitionedTable, Record};
use crate::error::{Error, Result};
use crate::hash::mix64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashMap;
use std::time::{Duration, Instant};

const BLOOM_SEED_TAG: u64 = 0x626c6f6f6d;
const SHUFFLE_SEED_TAG: u64 = 0x7368756666;
const COUNT_SEED_TAG: u64 = 0x636f756e74;

/// Floor below which target false-positive rates are clamped so filter
/// sizes stay finite.
pub const EPSILON_MIN: f64 = 1e-6;

/// Per-run configuration. `sel_big`/`sel_small` are the selectivities of
/// condition1/condition2; 1.0 keeps every row.
#[derive(Debug, Clone)]
pub struct JoinConfig {
    pub epsilon: f64,
    pub shuffle_partitions: usize,
    pub count_budget: Duration,
    pub worker_threads: usize,
    pub safety_factor: f64,
    pub seed: u64,
    pub sel_big: f64,
    pub sel_small: f64,
    /// Row cap for the broadcast-hash baseline's in-memory build side.
    pub broadcast_row_cap: u64,
}

impl Default for JoinConfig {
    fn default() -> Self {
        JoinConfig {
            epsilon: 0.01,
            shuffle_partitions: 200,
            count_budget: Duration::from_millis(50),
            worker_threads: 0, // 0 = rayon default
            safety_factor: 1.2,
            seed: 0,
            sel_big: 1.0,
            sel_small: 1.0,
            broadcast_row_cap: 10_000_000,
        }
    }
}

impl JoinConfig {
    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in (0, 1], got {}",
                self.epsilon
            )));
        }
        if self.shuffle_partitions == 0 {
            return Err(Error::InvalidArgument("shuffle_partitions must be >= 1".into()));
        }
        if self.safety_factor.is_nan() || self.safety_factor < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "safety_factor must be >= 1, got {}",
                self.safety_factor
            )));
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.worker_threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))
    }

    fn worker_count(&self) -> usize {
        if self.worker_threads == 0 {
            rayon::current_num_threads()
        } else {
            self.worker_threads
        }
    }
}

/// Result of the partition-sampling cardinality estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountEstimate {
    pub estimate: u64,
    pub scanned_partitions: usize,
    pub total_partitions: usize,
    pub exact: bool,
}

/// Wall-clock time per pipeline phase plus the counters the cost model
/// feeds on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseTimings {
    pub t_count: Duration,
    pub t_bloom_build: Duration,
    pub t_broadcast: Duration,
    pub t_filter_join: Duration,
    pub bytes_broadcast: u64,
    pub filtered_kept: u64,
    pub filtered_dropped: u64,
    pub result_rows: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BroadcastStats {
    pub payload_bytes: u64,
    pub bytes_broadcast: u64,
    pub workers: usize,
}

/// One inner-join output row: `(key, BIGTABLE.attribute1, SMALLTABLE.attribute2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JoinedRow {
    pub key: u64,
    pub big_attr: f64,
    pub small_attr: f64,
}

impl JoinedRow {
    /// Canonical form for multiset comparison (floats by bit pattern).
    pub fn canonical(&self) -> (u64, u64, u64) {
        (self.key, self.big_attr.to_bits(), self.small_attr.to_bits())
    }
}

/// Join output, partitioned the way the final stage produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinOutput {
    pub partitions: Vec<Vec<JoinedRow>>,
}

impl JoinOutput {
    pub fn num_rows(&self) -> u64 {
        self.partitions.iter().map(|p| p.len() as u64).sum()
    }

    /// Sorted canonical rows; two outputs are multiset-equal iff these match.
    pub fn sorted_multiset(&self) -> Vec<(u64, u64, u64)> {
        let mut rows: Vec<(u64, u64, u64)> = self
            .partitions
            .iter()
            .flatten()
            .map(JoinedRow::canonical)
            .collect();
        rows.sort_unstable();
        rows
    }
}

/// Everything one engine run reports back.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output: JoinOutput,
    pub timings: PhaseTimings,
    pub m_bits: u64,
    pub filter_bytes: u64,
}

/// Scans whole partitions in seeded-random order until the budget expires,
/// then extrapolates: `estimate = rows_seen * total / scanned`, rounded up.
pub fn approx_count(table: &PartitionedTable, seed: u64, budget: Duration) -> Result<CountEstimate> {
    let start = Instant::now();
    approx_count_inner(table, seed, |_| start.elapsed() >= budget)
}

/// Deterministic variant that stops after exactly `max_partitions` scanned
/// partitions, regardless of wall-clock time.
pub fn approx_count_limited(
    table: &PartitionedTable,
    seed: u64,
    max_partitions: usize,
) -> Result<CountEstimate> {
    approx_count_inner(table, seed, |scanned| scanned >= max_partitions)
}

fn approx_count_inner(
    table: &PartitionedTable,
    seed: u64,
    mut exhausted: impl FnMut(usize) -> bool,
) -> Result<CountEstimate> {
    let total = table.num_partitions();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "cannot estimate cardinality of a table with zero partitions".into(),
        ));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix64(seed ^ COUNT_SEED_TAG)));

    let mut rows_seen = 0u64;
    let mut checksum = 0u64;
    let mut scanned = 0usize;
    for idx in order {
        for r in &table.partitions[idx] {
            checksum ^= r.key; // force the scan
            rows_seen += 1;
        }
        scanned += 1;
        if scanned < total && exhausted(scanned) {
            break;
        }
    }
    std::hint::black_box(checksum);
    let estimate = (rows_seen as f64 * total as f64 / scanned as f64).ceil() as u64;
    Ok(CountEstimate {
        estimate,
        scanned_partitions: scanned,
        total_partitions: total,
        exact: scanned == total,
    })
}

/// Builds one private filter per partition inside the worker pool and merges
/// them in a parallel reduction. Bit-identical to a sequential build because
/// the per-key bit sets are independent and OR is associative and
/// commutative.
pub fn build_distributed_bloom(
    table: &PartitionedTable,
    params: &BloomParams,
    pool: &rayon::ThreadPool,
) -> Result<BloomFilter> {
    pool.install(|| {
        table
            .partitions
            .par_iter()
            .map(|part| {
                let mut f = BloomFilter::new(params.clone());
                for r in part {
                    f.insert(r.key);
                }
                Ok(f)
            })
            .reduce(
                || Ok(BloomFilter::new(params.clone())),
                |a, b| a?.merge(&b?),
            )
    })
}

/// Peer-to-peer fan-out accounting: the payload crosses the wire
/// `ceil(log2(max(2, workers)))` times. Delivery itself is a shared
/// reference in-process.
pub fn broadcast(filter: &BloomFilter, workers: usize) -> BroadcastStats {
    let payload = filter.serialized_len() as u64;
    let w = workers.max(2) as u64;
    let fan_out = (u64::BITS - (w - 1).leading_zeros()) as u64;
    BroadcastStats {
        payload_bytes: payload,
        bytes_broadcast: payload * fan_out,
        workers,
    }
}

/// Keeps big-side records that satisfy the predicate AND probe positive in
/// the filter. `kept + dropped` equals the predicate-surviving row count.
pub fn filter_big_table(
    big: &PartitionedTable,
    filter: &BloomFilter,
    selectivity: f64,
    pool: &rayon::ThreadPool,
) -> Result<(PartitionedTable, u64, u64)> {
    if !(selectivity > 0.0 && selectivity <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "selectivity must lie in (0, 1], got {selectivity}"
        )));
    }
    let parts: Vec<(Vec<Record>, u64, u64)> = pool.install(|| {
        big.partitions
            .par_iter()
            .map(|part| {
                let mut kept = Vec::new();
                let mut dropped = 0u64;
                for r in part {
                    if r.attr_filter < selectivity {
                        if filter.contains(r.key) {
                            kept.push(*r);
                        } else {
                            dropped += 1;
                        }
                    }
                }
                let k = kept.len() as u64;
                (kept, k, dropped)
            })
            .collect()
    });
    let kept_total = parts.iter().map(|(_, k, _)| k).sum();
    let dropped_total = parts.iter().map(|(_, _, d)| d).sum();
    let table = PartitionedTable {
        schema: big.schema,
        partitions: parts.into_iter().map(|(p, _, _)| p).collect(),
    };
    Ok((table, kept_total, dropped_total))
}

/// Shuffle partition index for a key: seeded key-only hash, shared by both
/// sides so matching keys co-locate. Independent of the Bloom hash family.
#[inline]
pub fn shuffle_index(key: u64, seed: u64, num_partitions: usize) -> usize {
    (mix64(key ^ mix64(seed ^ SHUFFLE_SEED_TAG)) % num_partitions as u64) as usize
}

/// Redistributes records so a record with key k lands in partition
/// `hash(k) mod num_partitions`.
pub fn shuffle(table: &PartitionedTable, num_partitions: usize, seed: u64) -> Result<PartitionedTable> {
    if num_partitions == 0 {
        return Err(Error::InvalidArgument("num_partitions must be >= 1".into()));
    }
    let mut partitions = vec![Vec::new(); num_partitions];
    for r in table.iter_records() {
        partitions[shuffle_index(r.key, seed, num_partitions)].push(*r);
    }
    Ok(PartitionedTable {
        schema: table.schema,
        partitions,
    })
}

/// Sorts both sides by key and merges, emitting the cross product of
/// equal-key groups. Output is sorted by key.
pub fn sort_merge_join(big: &[Record], small: &[Record]) -> Vec<JoinedRow> {
    let mut left: Vec<Record> = big.to_vec();
    let mut right: Vec<Record> = small.to_vec();
    left.sort_by_key(|r| r.key);
    right.sort_by_key(|r| r.key);

    let mut out = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    while i < left.len() && j < right.len() {
        let (lk, rk) = (left[i].key, right[j].key);
        if lk < rk {
            i += 1;
        } else if lk > rk {
            j += 1;
        } else {
            let i_end = left[i..].iter().take_while(|r| r.key == lk).count() + i;
            let j_end = right[j..].iter().take_while(|r| r.key == lk).count() + j;
            for l in &left[i..i_end] {
                for r in &right[j..j_end] {
                    out.push(JoinedRow {
                        key: lk,
                        big_attr: l.attr_project,
                        small_attr: r.attr_project,
                    });
                }
            }
            i = i_end;
            j = j_end;
        }
    }
    out
}

fn shuffle_and_join(
    big: &PartitionedTable,
    small: &PartitionedTable,
    config: &JoinConfig,
    pool: &rayon::ThreadPool,
) -> Result<JoinOutput> {
    let big_sh = shuffle(big, config.shuffle_partitions, config.seed)?;
    let small_sh = shuffle(small, config.shuffle_partitions, config.seed)?;
    let partitions: Vec<Vec<JoinedRow>> = pool.install(|| {
        big_sh
            .partitions
            .par_iter()
            .zip(small_sh.partitions.par_iter())
            .map(|(b, s)| sort_merge_join(b, s))
            .collect()
    });
    Ok(JoinOutput { partitions })
}

/// The full five-step cascade: count, plan+build, broadcast, pre-filter,
/// shuffle + sort-merge join. The output multiset equals the oracle join for
/// every epsilon: the filter admits false positives only, and those find no
/// partner in the final join.
pub fn bloom_cascade_join(
    big: &PartitionedTable,
    small: &PartitionedTable,
    config: &JoinConfig,
) -> Result<RunOutcome> {
    config.validate()?;
    let pool = config.pool()?;
    let mut timings = PhaseTimings::default();

    // Step 1: condition2 + approximate count of the small side.
    let t = Instant::now();
    let small_f = apply_predicate(small, config.sel_small)?;
    let est = approx_count(&small_f, config.seed, config.count_budget)?;
    timings.t_count = t.elapsed();

    // Step 2: plan the filter for the (safety-padded) estimate.
    let n_plan = ((est.estimate as f64 * config.safety_factor).ceil() as u64).max(1);
    let eps_plan = config.epsilon.clamp(EPSILON_MIN, 1.0 - EPSILON_MIN);
    let params = bloom::plan_parameters(n_plan, eps_plan, mix64(config.seed ^ BLOOM_SEED_TAG))?;

    // Step 2b: distributed build, merged in a reduction tree.
    let t = Instant::now();
    let filter = build_distributed_bloom(&small_f, &params, &pool)?;
    timings.t_bloom_build = t.elapsed();

    // Step 3: broadcast.
    let t = Instant::now();
    let serialized = filter.serialize();
    let stats = broadcast(&filter, config.worker_count());
    timings.t_broadcast = t.elapsed();
    timings.bytes_broadcast = stats.bytes_broadcast;
    let filter_bytes = serialized.len() as u64;

    // Steps 4 + 5: pre-filter the big side, then shuffle and join.
    let t = Instant::now();
    let (big_kept, kept, dropped) = filter_big_table(big, &filter, config.sel_big, &pool)?;
    let output = shuffle_and_join(&big_kept, &small_f, config, &pool)?;
    timings.t_filter_join = t.elapsed();

    timings.filtered_kept = kept;
    timings.filtered_dropped = dropped;
    timings.result_rows = output.num_rows();
    Ok(RunOutcome {
        output,
        timings,
        m_bits: params.m_bits,
        filter_bytes,
    })
}

/// Shuffle join without the filter cascade: predicates, shuffle, sort-merge.
pub fn baseline_shuffle_join(
    big: &PartitionedTable,
    small: &PartitionedTable,
    config: &JoinConfig,
) -> Result<RunOutcome> {
    config.validate()?;
    let pool = config.pool()?;
    let mut timings = PhaseTimings::default();

    let t = Instant::now();
    let small_f = apply_predicate(small, config.sel_small)?;
    let big_f = apply_predicate(big, config.sel_big)?;
    let output = shuffle_and_join(&big_f, &small_f, config, &pool)?;
    timings.t_filter_join = t.elapsed();

    timings.filtered_kept = big_f.num_rows();
    timings.filtered_dropped = 0;
    timings.result_rows = output.num_rows();
    Ok(RunOutcome {
        output,
        timings,
        m_bits: 0,
        filter_bytes: 0,
    })
}

/// Broadcast-hash baseline: the predicate-filtered small side becomes a
/// key -> rows map probed by every big partition in place. Errors out when
/// the build side exceeds the configured row cap.
pub fn baseline_broadcast_hash_join(
    big: &PartitionedTable,
    small: &PartitionedTable,
    config: &JoinConfig,
) -> Result<RunOutcome> {
    config.validate()?;
    let pool = config.pool()?;
    let mut timings = PhaseTimings::default();

    let t = Instant::now();
    let small_f = apply_predicate(small, config.sel_small)?;
    if small_f.num_rows() > config.broadcast_row_cap {
        return Err(Error::Capacity(format!(
            "small side has {} rows after condition2, broadcast cap is {}",
            small_f.num_rows(),
            config.broadcast_row_cap
        )));
    }
    let mut build: HashMap<u64, Vec<f64>> = HashMap::new();
    for r in small_f.iter_records() {
        build.entry(r.key).or_default().push(r.attr_project);
    }

    let sel_big = config.sel_big;
    if !(sel_big > 0.0 && sel_big <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "selectivity must lie in (0, 1], got {sel_big}"
        )));
    }
    let partitions: Vec<Vec<JoinedRow>> = pool.install(|| {
        big.partitions
            .par_iter()
            .map(|part| {
                let mut out = Vec::new();
                for r in part {
                    if r.attr_filter < sel_big {
                        if let Some(matches) = build.get(&r.key) {
                            for &small_attr in matches {
                                out.push(JoinedRow {
                                    key: r.key,
                                    big_attr: r.attr_project,
                                    small_attr,
                                });
                            }
                        }
                    }
                }
                out
            })
            .collect()
    });
    let output = JoinOutput { partitions };
    timings.t_filter_join = t.elapsed();
    timings.result_rows = output.num_rows();
    Ok(RunOutcome {
        output,
        timings,
        m_bits: 0,
        filter_bytes: 0,
    })
}

/// Brute-force inner join, the ground truth for every equivalence test.
/// Intended for small fixtures only.
pub fn nested_loop_oracle(
    big: &PartitionedTable,
    small: &PartitionedTable,
    sel_big: f64,
    sel_small: f64,
) -> Result<Vec<JoinedRow>> {
    for s in [sel_big, sel_small] {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "selectivity must lie in (0, 1], got {s}"
            )));
        }
    }
    let small_rows: Vec<&Record> = small
        .iter_records()
        .filter(|r| r.attr_filter < sel_small)
        .collect();
    let mut out = Vec::new();
    for b in big.iter_records() {
        if b.attr_filter >= sel_big {
            continue;
        }
        for s in &small_rows {
            if b.key == s.key {
                out.push(JoinedRow {
                    key: b.key,
                    big_attr: b.attr_project,
                    small_attr: s.attr_project,
                });
            }
        }
    }
    out.sort_unstable_by_key(|r| r.canonical());
    Ok(out)
}

/// Count of big-side records surviving condition1 whose keys are absent from
/// the condition2-filtered small side: what a perfect filter would drop.
pub fn n_filtrable(
    big: &PartitionedTable,
    small: &PartitionedTable,
    sel_big: f64,
    sel_small: f64,
) -> u64 {
    let small_keys: std::collections::HashSet<u64> = small
        .iter_records()
        .filter(|r| r.attr_filter < sel_small)
        .map(|r| r.key)
        .collect();
    big.iter_records()
        .filter(|r| r.attr_filter < sel_big && !small_keys.contains(&r.key))
        .count() as u64
}
