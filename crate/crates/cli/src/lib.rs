//! Experiment runner: configuration, data preparation, the pipeline stages
//! and the subcommands of the `graphfed` binary.

pub mod args;
pub mod commands;
pub mod config;
pub mod data;
pub mod pipeline;
pub mod report;

pub use commands::{run, Command};
pub use config::ExperimentConfig;
pub use report::{CliError, RunReport};
