use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: field `{field}`: {msg}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        field: String,
        msg: String,
    },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("record `{id}`: {msg}")]
    InvalidRecord { id: String, msg: String },

    #[error(
        "insufficient hours for `{language}`: requested {requested:.4} h, available {available:.4} h"
    )]
    InsufficientHours {
        language: String,
        requested: f64,
        available: f64,
    },

    #[error("hour budget infeasible: {0}")]
    Budget(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("media `{path}`: {msg}")]
    Media { path: PathBuf, msg: String },

    #[error("checkpoint `{path}`: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("non-finite loss at step {step}: term_av={term_av} term_va={term_va} term_aa={term_aa}")]
    NonFiniteLoss {
        step: usize,
        term_av: f64,
        term_va: f64,
        term_aa: f64,
    },

    #[error("zero-norm vector at position {0} in cosine similarity")]
    ZeroNorm(usize),

    #[error("empty reference transcript")]
    EmptyReference,

    #[error("io error on `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn media(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Media {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Errors caused by the caller's inputs (bad manifests, configs or hour
    /// budgets) rather than by a failure while running.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::ManifestParse { .. }
                | Error::DuplicateId(_)
                | Error::InvalidRecord { .. }
                | Error::InsufficientHours { .. }
                | Error::Budget(_)
                | Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::EmptyReference
        )
    }
}
