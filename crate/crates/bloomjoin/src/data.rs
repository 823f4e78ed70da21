//! TPC-H-like Orders/Lineitem tables: generation, predicate filtering,
//! partitioning and CSV I/O.
//!
//! Only the join-relevant shape of TPC-H is kept: orders holds
//! `scale_factor * 1.5M` rows with distinct keys, each order owns 1..=7
//! lineitem rows, and every table carries one projected attribute and one
//! uniformly distributed attribute that threshold predicates select on.
//! All values derive from the seed and the key alone, so generation is
//! order-independent and deterministic.

use crate::error::{Error, Result};
use crate::hash::{mix64, unit_f64};
use std::fmt::Write as _;
use std::path::Path;

const TAG_PROJECT: u64 = 0x70726f6a;
const TAG_FILTER: u64 = 0x66696c74;
const TAG_LINES: u64 = 0x6c696e65;

pub const ORDERS_PER_SCALE_UNIT: f64 = 1_500_000.0;
pub const MAX_LINES_PER_ORDER: u64 = 7;

/// One keyed row. `attr_project` is the column the join projects
/// (attribute1 on the big table, attribute2 on the small one);
/// `attr_filter` is the uniform column the per-table predicate thresholds
/// (attribute3 / attribute4).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub key: u64,
    pub attr_project: f64,
    pub attr_filter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    Orders,
    Lineitem,
    Generic,
}

impl Schema {
    /// CSV header columns. Column names follow the canonical query: the big
    /// table projects attribute1 and filters on attribute3, the small table
    /// projects attribute2 and filters on attribute4.
    pub fn columns(&self) -> [&'static str; 3] {
        match self {
            Schema::Orders => ["key", "attribute2", "attribute4"],
            Schema::Lineitem => ["key", "attribute1", "attribute3"],
            Schema::Generic => ["key", "attribute_project", "attribute_filter"],
        }
    }
}

/// Keyed records split into partitions, the unit of parallelism.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedTable {
    pub schema: Schema,
    pub partitions: Vec<Vec<Record>>,
}

impl PartitionedTable {
    pub fn from_records(schema: Schema, records: Vec<Record>) -> Self {
        PartitionedTable {
            schema,
            partitions: vec![records],
        }
    }

    pub fn num_rows(&self) -> u64 {
        self.partitions.iter().map(|p| p.len() as u64).sum()
    }

    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    pub fn iter_records(&self) -> impl Iterator<Item = &Record> {
        self.partitions.iter().flatten()
    }

    /// Records in partition order, useful for multiset comparisons.
    pub fn flatten(&self) -> Vec<Record> {
        self.iter_records().copied().collect()
    }
}

/// Generator knobs. The selectivities are carried here so sweep configs can
/// state, in one place, which predicates the engine should apply.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub scale_factor: f64,
    pub seed: u64,
    pub lines_per_order_range: (u64, u64),
    pub sel_big: f64,
    pub sel_small: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            scale_factor: 0.001,
            seed: 0,
            lines_per_order_range: (1, MAX_LINES_PER_ORDER),
            sel_big: 1.0,
            sel_small: 1.0,
        }
    }
}

fn attr(seed: u64, table_tag: u64, tag: u64, key: u64, salt: u64) -> f64 {
    unit_f64(mix64(seed ^ table_tag.rotate_left(17) ^ tag.rotate_left(33) ^ mix64(key ^ salt)))
}

/// Generates the orders (small) and lineitem (big) tables.
///
/// Orders gets `round(scale_factor * 1.5M)` rows with distinct keys `1..=N`;
/// each order key owns a seeded-uniform 1..=7 lineitem rows, so lineitem keys
/// are a superset-free subset of orders keys (referential integrity by
/// construction).
pub fn generate(config: &GenConfig) -> Result<(PartitionedTable, PartitionedTable)> {
    if !config.scale_factor.is_finite() || config.scale_factor <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "scale_factor must be positive, got {}",
            config.scale_factor
        )));
    }
    let (lo, hi) = config.lines_per_order_range;
    if lo < 1 || hi < lo {
        return Err(Error::InvalidArgument(format!(
            "invalid lines_per_order_range [{lo}, {hi}]"
        )));
    }
    let n_orders = ((config.scale_factor * ORDERS_PER_SCALE_UNIT).round() as u64).max(1);
    let span = hi - lo + 1;

    let mut orders = Vec::with_capacity(n_orders as usize);
    let mut lineitem = Vec::new();
    for key in 1..=n_orders {
        orders.push(Record {
            key,
            attr_project: attr(config.seed, 1, TAG_PROJECT, key, 0),
            attr_filter: attr(config.seed, 1, TAG_FILTER, key, 0),
        });
        let lines = lo + mix64(config.seed ^ TAG_LINES ^ mix64(key)) % span;
        for line in 0..lines {
            lineitem.push(Record {
                key,
                attr_project: attr(config.seed, 2, TAG_PROJECT, key, line + 1),
                attr_filter: attr(config.seed, 2, TAG_FILTER, key, line + 1),
            });
        }
    }
    Ok((
        PartitionedTable::from_records(Schema::Orders, orders),
        PartitionedTable::from_records(Schema::Lineitem, lineitem),
    ))
}

/// Keeps records whose filter attribute falls under `selectivity`. Because
/// the attribute is uniform on [0, 1), the achieved selectivity tracks the
/// configured one.
pub fn apply_predicate(table: &PartitionedTable, selectivity: f64) -> Result<PartitionedTable> {
    if !(selectivity > 0.0 && selectivity <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "selectivity must lie in (0, 1], got {selectivity}"
        )));
    }
    let partitions = table
        .partitions
        .iter()
        .map(|p| {
            p.iter()
                .filter(|r| r.attr_filter < selectivity)
                .copied()
                .collect()
        })
        .collect();
    Ok(PartitionedTable {
        schema: table.schema,
        partitions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionPolicy {
    /// Split into exactly `n` contiguous partitions of near-equal row count.
    ByCount(usize),
    /// Cut a new partition once the accumulated CSV byte size reaches the
    /// target.
    ByBytes(u64),
}

fn csv_row_len(record: &Record) -> u64 {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{},{},{}",
        record.key, record.attr_project, record.attr_filter
    );
    s.len() as u64
}

/// Redistributes records contiguously under the given policy. The
/// concatenation of the output partitions equals the concatenation of the
/// input ones.
pub fn partition(table: &PartitionedTable, policy: PartitionPolicy) -> Result<PartitionedTable> {
    let records = table.flatten();
    let partitions = match policy {
        PartitionPolicy::ByCount(n) => {
            if n == 0 {
                return Err(Error::InvalidArgument("partition count must be >= 1".into()));
            }
            let total = records.len();
            let base = total / n;
            let extra = total % n;
            let mut out = Vec::with_capacity(n);
            let mut it = records.into_iter();
            for i in 0..n {
                let size = base + usize::from(i < extra);
                out.push(it.by_ref().take(size).collect());
            }
            out
        }
        PartitionPolicy::ByBytes(target) => {
            if target == 0 {
                return Err(Error::InvalidArgument("byte target must be >= 1".into()));
            }
            let mut out: Vec<Vec<Record>> = vec![Vec::new()];
            let mut acc = 0u64;
            for r in records {
                if acc >= target {
                    out.push(Vec::new());
                    acc = 0;
                }
                acc += csv_row_len(&r);
                out.last_mut().unwrap().push(r);
            }
            out
        }
    };
    Ok(PartitionedTable {
        schema: table.schema,
        partitions,
    })
}

/// Writes the table as comma-separated UTF-8 with a header row. Floats use
/// the shortest round-trip decimal form, so a reload is lossless.
pub fn write_csv(table: &PartitionedTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(table.schema.columns())?;
    for r in table.iter_records() {
        w.write_record(&[
            r.key.to_string(),
            r.attr_project.to_string(),
            r.attr_filter.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a CSV written by [`write_csv`] into a single-partition table.
pub fn load_csv(path: &Path, schema: Schema) -> Result<PartitionedTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = rdr.headers()?.clone();
    let expect = schema.columns();
    if header.iter().ne(expect.iter().copied()) {
        return Err(Error::Schema(format!(
            "header {:?} does not match expected {:?}",
            header.iter().collect::<Vec<_>>(),
            expect
        )));
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |field: &str, what: &str| Error::Parse {
            line,
            message: format!("cannot parse {what} from {field:?}"),
        };
        if row.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 fields, got {}", row.len()),
            });
        }
        let key: u64 = row[0].parse().map_err(|_| parse_err(&row[0], "integer key"))?;
        let attr_project: f64 = row[1]
            .parse()
            .map_err(|_| parse_err(&row[1], "numeric attribute"))?;
        let attr_filter: f64 = row[2]
            .parse()
            .map_err(|_| parse_err(&row[2], "numeric attribute"))?;
        records.push(Record {
            key,
            attr_project,
            attr_filter,
        });
    }
    Ok(PartitionedTable::from_records(schema, records))
}
