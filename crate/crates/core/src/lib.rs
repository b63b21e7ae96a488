//! Preference-steerable policy mixtures over multi-objective environments.
//!
//! The crate builds a small end-to-end pipeline: single-objective policies are
//! trained with PPO, compressed into low-rank experts by pruned SVD of their
//! weight deltas, merged into interior-preference experts by sign-elected
//! averaging, and composed at inference time by a parameter-free geometric
//! router plus trainable per-module router experts. A harness sweeps
//! preference grids, compares against parameter-soup / logit-fusion /
//! per-preference-retraining baselines, and scores frontiers by hypervolume.

pub mod adapters;
pub mod error;
pub mod harness;
pub mod numkernel;
pub mod persist;
pub mod pipeline;
pub mod policy;
pub mod router;
pub mod simplex;
pub mod trainer;

pub use error::{Error, Result};
pub use numkernel::{DenseMatrix, RngStream, SvdResult};
