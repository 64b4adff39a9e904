//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the pruning toolkit.
///
/// Each variant corresponds to a distinct failure class; the CLI maps them
/// onto distinct nonzero exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration. Carries every problem found, not just the
    /// first, so a run never fails twice on the same file.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    /// A caller violated an operation's precondition (bad id, shape
    /// mismatch, inconsistent inputs).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Surgery would break the consecutive feedforward mapping
    /// (projection/downsampling blocks are never removable).
    #[error("incompatible unit: {0}")]
    Compatibility(String),

    /// A checkpoint or artifact file is corrupt or has the wrong version.
    #[error("bad file format in {path}: {detail} (expected format version {expected_version})")]
    Format {
        path: PathBuf,
        detail: String,
        expected_version: u32,
    },

    /// Dataset files are missing or unreadable.
    #[error("dataset ingestion failed for {file}: {detail}")]
    Ingestion { file: PathBuf, detail: String },

    /// Training diverged or could not proceed.
    #[error("training failed at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    /// Not enough data to compute the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A subcommand needs an artifact another subcommand has not produced.
    #[error("missing upstream artifact: {missing} ({hint})")]
    Dependency { missing: PathBuf, hint: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn compatibility(msg: impl Into<String>) -> Self {
        Error::Compatibility(msg.into())
    }
}
