//! Experiment orchestration: layered run configs, baseline and PPO runs,
//! sweeps and reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::{ControllerKind, RunConfig};
pub use error::CliError;
