use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library. Each variant maps onto a coarse category
/// (see [`Error::category`]) that the CLI turns into an exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("series has {found} frames, at least 3 are required")]
    TooFewFrames { found: usize },
    #[error("timestamps must be strictly increasing and positive (violated at index {index}: {value} ms)")]
    NonIncreasingTimestamps { index: usize, value: f64 },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("count mismatch for {what}: expected {expected}, found {found}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {what} at index {index}")]
    NonFiniteValue { what: &'static str, index: usize },
    #[error("series is constant, cannot min-max normalize")]
    ConstantSeries,
    #[error("T1 must be positive, got {0}")]
    NonPositiveT1(f64),
    #[error("observed values are constant, R² is undefined")]
    ConstantObserved,
    #[error("mask is empty")]
    EmptyMask,
    #[error("series is not normalized: intensity range [{min}, {max}] exceeds [0, 1]")]
    NotNormalized { min: f64, max: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("missing frame file {0}")]
    MissingFrame(PathBuf),
    #[error("{path} holds {found} bytes, expected {expected}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),
    #[error("image encoding failed: {0}")]
    Encode(String),
}

/// Broad error classes, stable across releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Numerical,
    Config,
    Io,
    Format,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            TooFewFrames { .. }
            | NonIncreasingTimestamps { .. }
            | ShapeMismatch { .. }
            | CountMismatch { .. }
            | NonFiniteValue { .. }
            | NotNormalized { .. }
            | EmptyMask => ErrorCategory::Validation,
            ConstantSeries | NonPositiveT1(_) | ConstantObserved => ErrorCategory::Numerical,
            InvalidConfig(_) => ErrorCategory::Config,
            Io { .. } | Encode(_) => ErrorCategory::Io,
            Parse { .. } | MissingFrame(_) | SizeMismatch { .. } | Checksum(_) => {
                ErrorCategory::Format
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
