//! Experiment runner behind the `aczsl` binary: configuration files,
//! replicate execution with per-seed output directories, and report tables.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod report;
pub mod run;

pub use config::{DatasetSource, ExperimentConfig, SplitConfig};
