//! Crate-wide error type with stable process exit codes.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad user-supplied data: paths, labels, split requests, clip ids.
    #[error("input error: {0}")]
    Input(String),

    /// Inconsistent configuration: shape mismatches, invalid intrinsics,
    /// unknown tags, incompatible network specs.
    #[error("configuration error: {0}")]
    Config(String),

    /// A documented invariant was violated at runtime (non-normalized
    /// distributions, NaN gradients, mismatched tap shapes).
    #[error("contract violation: {0}")]
    Contract(String),

    /// On-disk artifact failed validation (bad magic, truncation, dims
    /// disagreeing with the manifest).
    #[error("corrupt data in {path}: {reason}")]
    CorruptData { path: PathBuf, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptData {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 0 is success, each failure class gets its own code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) => 2,
            Error::Config(_) => 3,
            Error::Contract(_) => 4,
            Error::CorruptData { .. } => 5,
            Error::Io(_) => 6,
        }
    }
}
