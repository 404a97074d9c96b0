//! Experiment harness behind the `fracmet` binary: configuration, named test
//! metrics, subcommands and reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod generators;
pub mod report;
pub mod suite;

pub use commands::{run, Context, Overrides};
pub use config::ExperimentConfig;
pub use error::CliError;
pub use report::{Check, Report};
