use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CtpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CtpError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("malformed file {}: {detail}", .path.display())]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CtpError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        CtpError::Contract(msg.into())
    }

    pub(crate) fn dim(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        CtpError::Dimension {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
