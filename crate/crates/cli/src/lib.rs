//! Batch front door: configuration parsing, dataset assembly, and the
//! `pretrain` / `eval` / `finetune` / `ablate` / `export-embeddings` /
//! `gen-data` commands.
//!
//! Exit codes: 0 success, 2 configuration errors (including task/version
//! mismatches), 3 data errors, 4 numeric aborts, 1 anything else.

pub mod commands;
pub mod config;
pub mod report;
pub mod synth;

use thiserror::Error;
use timedrl_core::data::DataError;
use timedrl_core::encoder::EncoderError;
use timedrl_core::evaluation::EvalError;
use timedrl_core::trainer::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("task mismatch: {0}")]
    TaskMismatch(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl CliError {
    /// Documented process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::TaskMismatch(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } => {
                CliError::Numeric(e.to_string())
            }
            TrainError::VersionMismatch { .. }
            | TrainError::PrecisionMismatch
            | TrainError::ConfigInvalid(_) => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::ConfigInvalid(_) => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::NoLabeledSamples => CliError::Data(EvalError::NoLabeledSamples.to_string()),
            EvalError::EmptySplit(which) => CliError::Data(EvalError::EmptySplit(which).to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}
