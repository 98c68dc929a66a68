//! Error type shared across the crate.

use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, PruneError>;

/// Errors emitted by graph validation, kernels, pipelines, and I/O.
#[derive(Debug)]
pub enum PruneError {
    /// A tensor or layer received data of the wrong shape.
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },
    /// A model graph violates a structural invariant.
    InvalidGraph { layer: String, reason: String },
    /// A channel configuration is inconsistent with its graph.
    InvalidConfig { reason: String },
    /// An operation received an out-of-domain argument.
    InvalidArgument { context: String, reason: String },
    /// A numeric operation produced or received non-finite values.
    NonFinite { context: String },
    /// Rejection sampling exhausted its attempt budget.
    SamplingExhausted {
        accepted: usize,
        requested: usize,
        attempts: usize,
        hint: String,
    },
    /// A data or checkpoint file failed to parse.
    Format {
        path: String,
        offset: Option<u64>,
        reason: String,
    },
    Io(io::Error),
}

impl fmt::Display for PruneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PruneError::ShapeMismatch {
                context,
                expected,
                actual,
            } => write!(f, "{context}: expected shape {expected}, got {actual}"),
            PruneError::InvalidGraph { layer, reason } => {
                write!(f, "invalid graph at layer '{layer}': {reason}")
            }
            PruneError::InvalidConfig { reason } => write!(f, "invalid channel config: {reason}"),
            PruneError::InvalidArgument { context, reason } => write!(f, "{context}: {reason}"),
            PruneError::NonFinite { context } => {
                write!(f, "{context}: non-finite values encountered")
            }
            PruneError::SamplingExhausted {
                accepted,
                requested,
                attempts,
                hint,
            } => write!(
                f,
                "sampling exhausted after {attempts} attempts ({accepted}/{requested} accepted); {hint}"
            ),
            PruneError::Format {
                path,
                offset,
                reason,
            } => match offset {
                Some(off) => write!(f, "{path}: {reason} (at byte offset {off})"),
                None => write!(f, "{path}: {reason}"),
            },
            PruneError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for PruneError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            PruneError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for PruneError {
    fn from(e: io::Error) -> Self {
        PruneError::Io(e)
    }
}

impl PruneError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        PruneError::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn arg(context: impl Into<String>, reason: impl Into<String>) -> Self {
        PruneError::InvalidArgument {
            context: context.into(),
            reason: reason.into(),
        }
    }
}
