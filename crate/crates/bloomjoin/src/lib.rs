//! Bloom-filtered cascade join engine over partitioned in-memory tables,
//! with an execution-time cost model for picking the filter's
//! false-positive rate.
//!
//! The cascade pre-filters the big side of an inner join with a mergeable
//! Bloom filter built in parallel over the small side, then shuffles both
//! sides by key and sort-merge joins each partition pair. The [`costmodel`]
//! module fits build-time and join-time models from sweep measurements and
//! solves for the epsilon minimizing their sum.

pub mod bench;
pub mod bloom;
pub mod costmodel;
pub mod data;
pub mod engine;
pub mod error;
pub mod hash;

pub use error::{Error, Result};
