//! File formats, configuration, experiment runner, and reports for the
//! `pfin-core` federated simulator. The `pfin` binary wraps this crate.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod executor;
pub mod experiment;
pub mod fixtures;
pub mod manifest;
pub mod matrix;
pub mod report;
pub mod selftest;

pub use config::{ExperimentConfig, Ratio};
pub use error::{Result, SimError};
pub use experiment::{execute, run_experiment, Existing, ExperimentOutcome, Summary};
pub use report::{compare, ResultTable};
