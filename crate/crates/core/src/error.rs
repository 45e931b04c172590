use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error for subject {subject}: {message}")]
    Validation { subject: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix error: {0}")]
    Matrix(String),

    #[error("optimization did not converge after {iterations} iterations (last iterate {last})")]
    Optimization { iterations: usize, last: f64 },

    #[error("estimation error for event type {event_type}: {message}")]
    Estimation { event_type: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("study error: {0}")]
    Study(String),

    /// A fit aborted part way; `trace` holds the iterations completed so far.
    #[error("{stage} failed at iteration {iteration}: {source}")]
    Fit {
        stage: &'static str,
        iteration: usize,
        #[source]
        source: Box<Error>,
        trace: Vec<crate::mcem::IterationRecord>,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
