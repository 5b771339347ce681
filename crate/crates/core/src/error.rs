use std::path::PathBuf;

use crate::model::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("step index {index} out of range (model has {steps} steps)")]
    InvalidStep { index: usize, steps: usize },

    #[error("symmetric factorization failed for {0}")]
    Factorization(&'static str),

    #[error("ensemble needs at least 2 members, got {0}")]
    TooFewMembers(usize),

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("invalid model: {}", join_violations(.0))]
    InvalidModel(Vec<Violation>),

    #[error("invalid study config: {0}")]
    InvalidConfig(String),

    #[error("{0}")]
    Estimator(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {message}")]
    Parse { context: String, message: String },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by unreadable or malformed input rather
    /// than by a well-formed but mathematically invalid one.
    pub fn is_input_failure(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Parse { .. })
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
