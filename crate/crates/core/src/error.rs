use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed volume metadata: {0}")]
    Metadata(String),

    #[error("raw data holds {actual} bytes but metadata declares {expected}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("non-binary voxel value {value} at byte offset {offset}")]
    NonBinary { offset: usize, value: u8 },

    #[error("incompatible layout: {0}")]
    Layout(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("cholesky factorization failed even with nugget {nugget:e}")]
    NotPositiveDefinite { nugget: f64 },

    #[error("optimizer did not converge; best residual {best_residual:e} at {best_params:?}")]
    NoConvergence {
        best_residual: f64,
        best_params: Vec<f64>,
    },

    #[error("solver stopped after {iterations} iterations at relative residual {residual:e}")]
    SolverNoConvergence { iterations: usize, residual: f64 },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("tolerance {requested:e} unreachable under the level cap; achievable {achievable:e}")]
    ToleranceUnreachable { requested: f64, achievable: f64 },

    #[error("record format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
