//! Experiment harness: configs, stock scenarios, parallel batches, outputs and the CLI.

pub mod batch;
pub mod cli;
pub mod config;
pub mod output;
pub mod scenarios;

use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::feedback::FeedbackError;
use crate::model::ModelError;

pub use batch::{run_batch, ExperimentResult, RunOptions, Summary, Trajectory};
pub use config::{ExperimentConfig, FilterMode, InitialStates, ModelConfig, StateSpec};

/// Exit status for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for invariant violations and runtime failures.
pub const EXIT_VIOLATION: i32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("config not found: {0}")]
    MissingConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Violation(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_)
            | HarnessError::MissingConfig(_)
            | HarnessError::Model(_)
            | HarnessError::Feedback(_) => EXIT_USAGE,
            _ => EXIT_VIOLATION,
        }
    }
}
