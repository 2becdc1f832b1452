use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DogeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DogeError {
    /// Operand shapes do not fit the operation.
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Token ids, corpora or files whose content is unusable.
    #[error("data error: {0}")]
    Data(String),

    /// A caller broke a precondition of an operation.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad file format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<DogeError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DogeError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        DogeError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        DogeError::Contract(detail.into())
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        DogeError::Config(detail.into())
    }

    pub(crate) fn data(detail: impl Into<String>) -> Self {
        DogeError::Data(detail.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        DogeError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        DogeError::Step {
            step,
            source: Box::new(self),
        }
    }
}
