use std::fmt;

use crate::dataset::RewardRegime;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the command-line front end to pick an exit
/// code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad flags or configuration (exit code 1).
    Usage,
    /// Malformed or semantically invalid data (exit code 2).
    Data,
    /// Failure while running an experiment arm (exit code 3).
    Runtime,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 1,
            ErrorCategory::Data => 2,
            ErrorCategory::Runtime => 3,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed dataset file ({location}): {message}")]
    Format { location: String, message: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("reward regime mismatch: operation requires {expected} data, dataset is {found}")]
    RegimeMismatch {
        expected: RewardRegime,
        found: RewardRegime,
    },

    #[error("success flags missing on trajectory {0}")]
    MissingSuccessFlags(usize),

    #[error("filter retained no trajectories ({0}); refusing to train on an empty dataset")]
    EmptyFilter(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration:\n{}", ConfigList(.0))]
    Config(Vec<String>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("benchmark arm {arm} failed: {message}")]
    Arm { arm: String, message: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

struct ConfigList<'a>(&'a [String]);

impl fmt::Display for ConfigList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, item) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  - {item}")?;
        }
        Ok(())
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorCategory::Usage,
            Error::Arm { .. } | Error::NonFinite(_) | Error::Shape { .. } | Error::NonScalarLoss(_) => {
                ErrorCategory::Runtime
            }
            _ => ErrorCategory::Data,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
