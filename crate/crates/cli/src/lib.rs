//! Experiment harness: JSON configs, the `run`, `quantify`, `theory`, `sweep`
//! and `partition` workflows, and their CSV/JSON outputs.

pub mod config;
mod error;
pub mod experiment;
pub mod output;
pub mod sweep;
pub mod theory;

pub use error::{CliError, CliResult};
