//! Experiment configuration, task orchestration, and report emission.
//!
//! Configs are JSON documents with exact-rational string encodings for
//! weights and coordinates (rationals never pass through binary floating
//! point). Reports split into a deterministic body — byte-identical for
//! identical `(config, seed)` — and a small non-deterministic envelope
//! (wall clock) kept out of the body.

pub mod config;
pub mod report;
pub mod tasks;

pub use config::{parse_config, ExperimentConfig, TaskConfig};
pub use report::RunReport;
pub use tasks::run;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("task error: {0}")]
    Task(#[from] torlab_core::CoreError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit code: 2 config, 3 task, 4 budget.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Task(e) => match e {
                torlab_core::CoreError::BudgetExceeded(_)
                | torlab_core::CoreError::BudgetExhausted { .. }
                | torlab_core::CoreError::WeightOverflow(_) => 4,
                _ => 3,
            },
            CliError::Io(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
