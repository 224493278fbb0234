//! Experiment harness for NFM: configuration, data preparation, training,
//! evaluation and the `nfm` command-line front end.

pub mod batch;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod filter;
pub mod gradcheck;
pub mod train;

pub use config::{DataSource, OptimConfig, RunConfig};
