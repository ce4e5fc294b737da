//! Sharded Bayesian additive regression trees.
//!
//! The library has three layers:
//!
//! * [`tree`]: binary regression trees on a finite cut grid, with the
//!   structural moves samplers need.
//! * [`design`]: leaf-sample-allocation criteria for tree partitions and the
//!   allocation optimizers built on them.
//! * [`bart`] and [`sharded`]: a backfitting ensemble sampler and the
//!   sharded model that runs one ensemble per leaf of an auxiliary-axis
//!   sharding tree, updating shards in parallel.
//!
//! [`bench`] holds the synthetic test functions and the experiment harness;
//! [`io`] the dataset and model-dump formats used by the CLI.

pub mod bart;
pub mod data;
pub mod design;
pub mod error;
pub mod bench;
pub mod io;
pub mod rng;
pub mod sharded;
pub mod tree;

pub use error::{Error, Result};
