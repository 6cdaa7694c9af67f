//! Command-line pipeline and HTTP service over a model directory.

pub mod commands;
pub mod service;

use capret_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(CoreError::Config { .. }) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Score as reported over JSON: rounded to 6 decimals.
pub fn round_score(score: f32) -> f64 {
    (f64::from(score) * 1e6).round() / 1e6
}
