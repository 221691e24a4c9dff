use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding one of the binary containers. Every variant
/// carries the byte offset at which decoding stopped.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {version} at byte {offset}")]
    UnsupportedVersion { version: u32, offset: usize },
    #[error("unsupported dtype {dtype} at byte {offset}")]
    UnsupportedDtype { dtype: u8, offset: usize },
    #[error("truncated container: needed {needed} bytes at byte {offset}, only {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("dimension overflow at byte {offset}: {detail}")]
    DimensionOverflow { offset: usize, detail: String },
    #[error("malformed field at byte {offset}: {detail}")]
    Malformed { offset: usize, detail: String },
    #[error("{count} trailing bytes after byte {offset}")]
    TrailingBytes { offset: usize, count: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("matrix is not symmetric: |a[{row},{col}] - a[{col},{row}]| = {diff:e}")]
    NotSymmetric { row: usize, col: usize, diff: f64 },
    #[error("eigendecomposition did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("class {class_id} has no samples; skip it instead of augmenting")]
    EmptyClass { class_id: u32 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Container {
        path: PathBuf,
        #[source]
        source: ContainerError,
    },
    #[error(transparent)]
    Decode(#[from] ContainerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// bad input data, 4 for everything that fails at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json { .. } => 2,
            Error::NonFinite { .. }
            | Error::DimensionMismatch { .. }
            | Error::NotSymmetric { .. }
            | Error::InvalidData(_)
            | Error::EmptyClass { .. }
            | Error::Container { .. }
            | Error::Decode(_) => 3,
            Error::NoConvergence { .. } | Error::Io { .. } | Error::Runtime(_) => 4,
        }
    }
}
