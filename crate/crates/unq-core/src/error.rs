use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operands disagree on dimensions. `context` names the operation.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// Batch statistics need at least two rows.
    #[error("batch normalization in training mode needs a batch of >= 2 rows, got {rows}")]
    InvalidBatch { rows: usize },

    /// A stored code addresses a codeword that does not exist.
    #[error("code {code} out of range for a codebook of {size} codewords")]
    InvalidCode { code: usize, size: usize },

    /// Bad hyperparameters or mutually exclusive options.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A file failed structural validation. `offset` is the byte position of
    /// the first inconsistency.
    #[error("{}: {message} at byte {offset}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A loss term left the finite range during training.
    #[error("non-finite value in the {term} loss term; aborting")]
    NonFiniteLoss { term: &'static str },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    pub fn shape(
        context: &'static str,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
