//! Experiment runner for the MLR agents: configuration, training loop,
//! ablation grids and plots.

pub mod ablation;
pub mod config;
pub mod error;
pub mod log;
pub mod plot;
pub mod runner;

pub use config::{load_config, ExperimentConfig};
pub use error::{CliError, Result};
pub use runner::{run_pretrain, run_train, RunSummary, Trainer};
