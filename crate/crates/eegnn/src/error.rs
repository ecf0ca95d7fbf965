//! Error taxonomy shared across the crate.
//!
//! Variants map onto the CLI's exit-code categories: configuration problems
//! exit with 2, data/format problems with 3, training divergence with 4 and
//! leakage-audit failures with 5.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration; `path` is the dotted JSON path of the offending key.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// Precondition or invariant violation on in-memory data.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed on-disk content (bad JSON, undecodable payload, ...).
    #[error("format error in {file}: {message}")]
    Format { file: String, message: String },

    /// Payload length disagrees with what the header promised.
    #[error("size mismatch in {file}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        file: String,
        expected: u64,
        actual: u64,
    },

    #[error("unsupported format_version {found} (supported: {supported})")]
    FormatVersion { found: u32, supported: u32 },

    /// A degree entry too close to zero for D^{-1/2} A D^{-1/2} to be meaningful.
    #[error("degenerate degree at node {node}: |degree| = {value:e} <= 1e-12")]
    DegenerateDegree { node: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged: non-finite loss at batch {batch}")]
    Divergence { batch: usize },

    /// A parameter or activation went non-finite outside the per-batch loss check.
    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("leakage audit failure: {0}")]
    Leakage(String),

    /// A protocol fold failed; carries the underlying error for its category.
    #[error("fold {fold} failed: {source}")]
    FoldFailed {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// CLI exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Validation(_)
            | Error::Io { .. }
            | Error::Format { .. }
            | Error::SizeMismatch { .. }
            | Error::FormatVersion { .. }
            | Error::DegenerateDegree { .. }
            | Error::Shape(_) => 3,
            Error::Divergence { .. } | Error::NonFinite(_) => 4,
            Error::Leakage(_) => 5,
            Error::FoldFailed { source, .. } => source.exit_code(),
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
