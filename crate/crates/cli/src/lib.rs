//! Configuration, checkpoints, metrics and the `mfnet` subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

pub use config::RunConfig;
pub use error::{CliError, Result};
