//! Experiment orchestration on top of `ctxf-core`.

pub mod config;
pub mod pipeline;

pub use config::ExperimentConfig;
