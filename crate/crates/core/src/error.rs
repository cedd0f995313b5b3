use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the editing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("zero vector in {0} (norm below 1e-12)")]
    ZeroVector(&'static str),

    #[error("bad template {template:?}: expected exactly one `{{}}` placeholder, found {found}")]
    BadTemplate { template: String, found: usize },

    #[error("bad dims: {0}")]
    BadDims(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("backend failure: {0}")]
    BackendFailure(String),

    #[error("missing backend: {0}")]
    MissingBackend(&'static str),

    #[error("degenerate homography after {attempts} attempts")]
    DegenerateHomography { attempts: usize },

    #[error("crop fraction {0} outside (0, 1]")]
    BadFraction(f64),

    #[error("missing loss term `{0}` with non-zero weight")]
    MissingTerm(&'static str),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error(
        "query direction vanished at step {step}: edited image equals the source; \
         set init.epsilon > 0 or enable augmentation"
    )]
    DegenerateQuery { step: u64 },

    #[error("unknown variant override {0}")]
    UnknownVariant(String),

    #[error("corrupt checkpoint ({field}): {reason}")]
    CorruptCheckpoint { field: String, reason: String },

    #[error("config error at key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("bad latent file {path}: {msg}")]
    LatentFile { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn corrupt(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::CorruptCheckpoint {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
