//! Experiment runner: TOML configs in, CSV rows, manifests, summaries and SVG charts out.

pub mod chart;
pub mod config;
pub mod error;
pub mod results;
pub mod runner;
pub mod summarize;

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::CliError;
pub use results::ResultRow;
pub use runner::{run_experiment, RunOutcome};
pub use summarize::summarize;
