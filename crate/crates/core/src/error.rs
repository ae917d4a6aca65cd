//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation received tensors whose shapes do not conform.
    #[error("{op}: shape mismatch: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    /// Misuse of the recording graph (backward twice, non-scalar loss, mixed tapes).
    #[error("graph error: {0}")]
    Graph(String),

    /// Invalid configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed dataset file or inconsistent sample.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint decode failure; `offset` is the byte position of the failure.
    #[error("checkpoint error at byte {offset}: {msg}")]
    Checkpoint { offset: u64, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training aborted (non-finite loss or gradient).
    #[error("training aborted: {0}")]
    Train(String),

    /// Gradient-check harness failure (e.g. the probed function is not deterministic).
    #[error("gradient check: {0}")]
    GradCheck(String),

    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Shape {
            op,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
