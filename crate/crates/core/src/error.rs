use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("insufficient history: need {needed} samples, got {got}")]
    InsufficientHistory { needed: usize, got: usize },

    #[error("insufficient future: need {needed} samples, got {got}")]
    InsufficientFuture { needed: usize, got: usize },

    #[error("batch normalization needs at least 2 rows in training mode, got {0}")]
    DegenerateBatch(usize),

    #[error("parse error in `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("cache integrity check failed for {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }
}
