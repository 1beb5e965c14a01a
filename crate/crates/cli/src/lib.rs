//! Configuration, experiment orchestration and CSV exports for the
//! `skillfuse` command.

pub mod config;
pub mod experiment;
pub mod export;

pub use config::{parse_config, RunConfig, StrategyName};
pub use experiment::{run_experiment, ExperimentOutcome};
