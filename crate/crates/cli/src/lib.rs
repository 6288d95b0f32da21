//! Experiment runner for the lesionforge pipeline: config parsing, the
//! `prepare`, `seg`, `train`, `evaluate` and `gradcheck` subcommands, and
//! run records.

pub mod commands;
pub mod config;
pub mod error;
pub mod record;
pub mod workspace;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
