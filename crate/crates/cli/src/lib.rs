//! Experiment orchestration for memgen: configuration, the run manifest,
//! pipeline stages, and the report bundle.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, Stage};
pub use error::{CliError, CliResult};
pub use pipeline::{Pipeline, Role};
