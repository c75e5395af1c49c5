//! Config-driven experiment runner around `debias-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod report;
pub mod runner;

pub use commands::run;
pub use config::ExperimentConfig;
pub use error::CliError;
