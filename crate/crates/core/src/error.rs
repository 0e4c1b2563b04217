use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid distribution {what}: {detail}")]
    InvalidDistribution { what: String, detail: String },
    #[error("invalid parameter {name}: {detail}")]
    InvalidParameter { name: &'static str, detail: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("empty version space")]
    EmptyVersionSpace,
    #[error("every model assigns zero likelihood to the data")]
    InconsistentClass,
    #[error("reward or initial distribution differ between models")]
    SharedTaskMismatch,
    #[error("coverage {target:.3} unattainable: best coverage {achieved:.3}")]
    UnattainableCoverage { target: f64, achieved: f64 },
    #[error("behavior policy has zero probability at (s={state}, a={action})")]
    ZeroBehaviorProbability { state: usize, action: usize },
    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("config error at {path}: {detail}")]
    Config { path: String, detail: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub(crate) fn check_dim(axis: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            axis,
            expected,
            actual,
        });
    }
    Ok(())
}

pub(crate) fn param(name: &'static str, detail: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        detail: detail.into(),
    }
}
