use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid flow time {t} for {context}")]
    InvalidTime { context: &'static str, t: f64 },

    #[error("step dt={dt} exceeds remaining time t={t}")]
    StepTooLarge { dt: f64, t: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown instruction label: {0}")]
    UnknownLabel(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("quality threshold not met: {0}")]
    Threshold(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("malformed csv {path}: {reason}")]
    MalformedCsv { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}

pub(crate) fn check_finite(context: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}
