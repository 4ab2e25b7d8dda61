use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the forecasting pipeline.
///
/// The variants map onto the process exit codes used by the command line
/// front end: configuration problems, data problems and numeric failures are
/// kept distinct so callers can react to each.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("ingestion error at row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("split `{split}` is too short for any window (length {len}, need {need})")]
    EmptySplit {
        split: &'static str,
        len: usize,
        need: usize,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u8, expected: u8 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint does not match configuration: {0}")]
    ConfigMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 configuration, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigMismatch(_) | Error::Shape { .. } | Error::Contract(_) => 2,
            Error::Numeric(_) => 4,
            Error::Data(_)
            | Error::Ingest { .. }
            | Error::EmptySplit { .. }
            | Error::Format(_)
            | Error::Version { .. }
            | Error::Truncated(_)
            | Error::Io { .. } => 3,
        }
    }
}
