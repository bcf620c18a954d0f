use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid hierarchy: {0}")]
    Hierarchy(String),

    #[error("cycle detected through series `{0}`")]
    Cycle(String),

    #[error("duplicate series id `{0}`")]
    DuplicateId(String),

    #[error("unknown series id `{0}`")]
    UnknownSeries(String),

    #[error("boundary level `{level}`: {reason}")]
    Partition { level: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("numerically rank-deficient matrix in {context}; try adding jitter of about {suggested_jitter:e}")]
    NumericalRank {
        context: &'static str,
        suggested_jitter: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("dense materialization of {n} series exceeds the cap of {cap}")]
    DenseCap { n: usize, cap: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// `2` for bad inputs (files, ids, configuration), `3` for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericalRank { .. } | Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
