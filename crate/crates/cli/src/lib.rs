//! Experiment runner around the snippet pipeline: dataset synthesis,
//! training, evaluation, tracking and the variant/snippet-length ablation,
//! all driven by one flat config file.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod runner;

use thiserror::Error;

/// Failures sorted by exit code: 2 for anything the user wrote (config,
/// flags, contract mismatches), 3 for bad or missing files, 4 for numeric
/// blowups during a run.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<snipper_core::tensor::TensorError> for CliError {
    fn from(e: snipper_core::tensor::TensorError) -> Self {
        match e {
            snipper_core::tensor::TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<snipper_core::matching::MatchError> for CliError {
    fn from(e: snipper_core::matching::MatchError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<snipper_core::tracking::TrackError> for CliError {
    fn from(e: snipper_core::tracking::TrackError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<snipper_core::geometry::GeomError> for CliError {
    fn from(e: snipper_core::geometry::GeomError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<snipper_core::metrics::MetricError> for CliError {
    fn from(e: snipper_core::metrics::MetricError) -> Self {
        CliError::Config(e.to_string())
    }
}
