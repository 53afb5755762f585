//! Configuration and experiment runner behind the `brave` binary.

pub mod config;
pub mod runner;

pub use config::{
    apply_overrides, validate_config, ConfigError, ExperimentConfig, LogisticTask, Overrides, QuadraticTask, TaskConfig,
    Warning,
};
pub use runner::{model_checksum, run_experiment, simulate, RoundMetrics, RunError, RunOptions, Summary};
