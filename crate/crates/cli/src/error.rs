use std::fmt;

use r2dl::bioseq::BioError;
use r2dl::embeddings::EmbeddingError;
use r2dl::evaluation::EvalError;
use r2dl::frozen_model::ModelError;
use r2dl::labelmap::LabelMapError;
use r2dl::sparse_map::SparseError;
use r2dl::training::TrainError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_HASH: i32 = 4;

/// A failed command: the process exit code and a message for stderr.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn hash(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_HASH,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::HashMismatch { .. } => Self::hash(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BlobHash(_) | ModelError::ParametersMutated { .. } => {
                Self::hash(e.to_string())
            }
            ModelError::Blob(inner) => inner.into(),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<SparseError> for CliError {
    fn from(e: SparseError) -> Self {
        match e {
            SparseError::HashMismatch { .. } => Self::hash(e.to_string()),
            SparseError::InvalidConfig(_) => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<BioError> for CliError {
    fn from(e: BioError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<LabelMapError> for CliError {
    fn from(e: LabelMapError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::BadFraction(_) | EvalError::EmptySubset { .. } => {
                Self::config(e.to_string())
            }
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::config(e.to_string()),
            TrainError::Sparse(inner) => inner.into(),
            TrainError::Model(inner) => inner.into(),
            TrainError::LabelMap(inner) => inner.into(),
            TrainError::Eval(inner) => inner.into(),
            TrainError::NonFiniteLoss { .. } => Self::internal(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}
