use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the dialogue-learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("ambiguous proposal: reply names both `{first}` and `{second}` for choice set `{set}`")]
    AmbiguousProposal {
        set: String,
        first: String,
        second: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("empty candidate set")]
    EmptyCandidates,

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad input data rather than numerics or usage.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::UnknownToken(_)
                | Error::AmbiguousProposal { .. }
                | Error::Io { .. }
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Shape(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
