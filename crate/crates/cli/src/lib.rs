//! Experiment orchestration for the UNDO Flip-Flop models: configuration,
//! run directories and manifests, reports and SVG figures.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod plot;
pub mod report;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use pipeline::{Run, Subject};
