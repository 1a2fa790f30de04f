//! Library side of the `tformer-lab` binary.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;
pub mod heatmap;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
