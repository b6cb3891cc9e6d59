//! Experiment harness: config, pipeline stages, metrics, sweeps and verification.

pub mod checks;
pub mod config;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod stats;

pub use config::ExperimentConfig;
pub use metrics::{Method, MetricsRow};
pub use pipeline::{run_experiment, run_stage, sweep_sampling_size, RunOptions, Stage};
