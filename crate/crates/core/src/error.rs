//! Crate-wide error type and process exit-code mapping.

use std::path::PathBuf;

/// Errors produced anywhere in the engine.
///
/// Variants are grouped by how the CLI reports them: configuration problems
/// exit with code 2, data problems with code 3, and numeric failures
/// (divergence, non-finite values) with code 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value, unknown key, or inconsistent flags.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shapes or vector lengths that cannot be combined.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Checkpoint architecture does not match the requested architecture.
    #[error("architecture mismatch: checkpoint has {found}, expected {expected}")]
    ArchMismatch { expected: String, found: String },

    /// Malformed or inconsistent input data (volumes, masks, manifests).
    #[error("data error: {0}")]
    Data(String),

    /// A pool or volume does not hold enough slices for the requested sampling.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A volume whose non-zero intensities cannot be normalized.
    #[error("degenerate volume: {0}")]
    Degenerate(String),

    /// Train/test isolation or protocol preconditions violated.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// File system failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A forward operation produced NaN or Inf.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Invalid numeric operation (log of a non-positive value, etc.).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss or parameters.
    #[error("training diverged on task {task}{}", .epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default())]
    Diverged { task: String, epoch: Option<usize> },
}

impl Error {
    /// Attach a file path to a raw IO error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) | Error::ArchMismatch { .. } => 2,
            Error::Data(_)
            | Error::InsufficientData(_)
            | Error::Degenerate(_)
            | Error::Protocol(_)
            | Error::Io { .. } => 3,
            Error::NonFinite { .. } | Error::Numeric(_) | Error::Diverged { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_group_by_failure_class() {
        assert_eq!(Error::Config("bad key".into()).exit_code(), 2);
        assert_eq!(Error::Dimension("rank".into()).exit_code(), 2);
        assert_eq!(
            Error::ArchMismatch { expected: "a".into(), found: "b".into() }.exit_code(),
            2
        );
        assert_eq!(Error::Data("mask".into()).exit_code(), 3);
        assert_eq!(Error::InsufficientData("pool".into()).exit_code(), 3);
        assert_eq!(Error::Protocol("overlap".into()).exit_code(), 3);
        assert_eq!(Error::NonFinite { op: "conv2d" }.exit_code(), 4);
        assert_eq!(
            Error::Diverged { task: "t0".into(), epoch: Some(3) }.exit_code(),
            4
        );
    }

    #[test]
    fn diverged_message_includes_context() {
        let err = Error::Diverged { task: "organ_a/vol3".into(), epoch: Some(7) };
        let msg = err.to_string();
        assert!(msg.contains("organ_a/vol3"), "missing task id: {msg}");
        assert!(msg.contains("epoch 7"), "missing epoch: {msg}");
    }
}
