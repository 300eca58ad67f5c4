use std::path::PathBuf;

use crate::linalg::SingularTriplet;
use crate::lstm::Gate;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("power iteration did not converge after {iterations} iterations")]
    NoConvergence {
        iterations: usize,
        last: Box<SingularTriplet>,
    },

    #[error("decomposition of gate {gate} failed at step {step}: {source}")]
    Decompose {
        gate: Gate,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value in gate {gate} pre-activation")]
    NonFinite { gate: Gate },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("hash mismatch for blob `{blob}`")]
    HashMismatch { blob: String },

    #[error("malformed container (blob `{blob}`): {detail}")]
    Structural { blob: String, detail: String },

    #[error("unsupported container version {0}")]
    UnknownVersion(u32),

    #[error("unsupported endianness tag `{0}`")]
    Endianness(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("no design meets the latency budget of {budget:e} s (fastest available: {fastest:e} s)")]
    NoDesignWithinBudget { budget: f64, fastest: f64 },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidArgument(_) | Error::Dimension { .. } => ErrorCategory::Usage,
            Error::Io { .. }
            | Error::HashMismatch { .. }
            | Error::Structural { .. }
            | Error::UnknownVersion(_)
            | Error::Endianness(_)
            | Error::Format(_) => ErrorCategory::Data,
            Error::NoConvergence { .. }
            | Error::Decompose { .. }
            | Error::NonFinite { .. }
            | Error::Infeasible(_)
            | Error::NoDesignWithinBudget { .. } => ErrorCategory::Infeasible,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Infeasible,
}

pub(crate) fn ensure_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
