use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("item {0} is not in the catalog")]
    UnknownItem(String),

    #[error("no click count recorded for item {0}")]
    MissingClickCount(String),

    #[error("item {0} is outside the embedding vocabulary")]
    OutOfVocabulary(String),

    #[error("category {0} is not in the category vocabulary")]
    UnknownCategory(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("user {0} has no long-term representation")]
    MissingRepresentation(String),

    #[error("no groups available")]
    EmptyGroups,

    #[error("prompt slot `{0}` was not supplied")]
    MissingSlot(String),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("backend error: {message}")]
    Backend { message: String, retryable: bool },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing artifact {artifact}; run `{producer}` first")]
    MissingArtifact { artifact: PathBuf, producer: &'static str },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn backend(message: impl Into<String>, retryable: bool) -> Self {
        Error::Backend {
            message: message.into(),
            retryable,
        }
    }

    /// True for transport-level failures worth retrying.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Backend { retryable: true, .. })
    }

    /// True for errors caused by the input data rather than usage or transport.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::UnknownItem(_)
                | Error::MissingClickCount(_)
                | Error::OutOfVocabulary(_)
                | Error::UnknownCategory(_)
                | Error::NonFinite(_)
                | Error::EmptyDataset(_)
                | Error::InsufficientSamples { .. }
                | Error::MissingRepresentation(_)
                | Error::EmptyGroups
                | Error::Shape(_)
                | Error::Checkpoint(_)
                | Error::Io { .. }
                | Error::Json(_)
        )
    }
}
