use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the engine.
///
/// Variants are grouped by [`ErrorKind`] so front ends can map them onto
/// distinct exit statuses.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("volume {path}: {reason}")]
    Volume { path: PathBuf, reason: VolumeFault },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// What exactly was wrong with a VVOL volume on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VolumeFault {
    BadMagic(String),
    BadDtype(String),
    BadOrder(String),
    ZeroExtent(Vec<usize>),
    Truncated { expected: usize, found: usize },
    Oversized { expected: usize, found: usize },
}

impl std::fmt::Display for VolumeFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VolumeFault::BadMagic(m) => write!(f, "magic mismatch (found {m:?}, expected \"VVOL1\")"),
            VolumeFault::BadDtype(d) => write!(f, "unsupported dtype {d:?}"),
            VolumeFault::BadOrder(o) => write!(f, "unsupported order {o:?}"),
            VolumeFault::ZeroExtent(s) => write!(f, "extents must be positive, got {s:?}"),
            VolumeFault::Truncated { expected, found } => {
                write!(f, "truncated payload: expected {expected} bytes, found {found}")
            }
            VolumeFault::Oversized { expected, found } => {
                write!(f, "payload size disagrees with shape: expected {expected} bytes, found {found}")
            }
        }
    }
}

/// Coarse error category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape { .. } | Error::Config(_) | Error::State(_) => ErrorKind::Usage,
            Error::NonFinite(_) => ErrorKind::Numeric,
            Error::Data(_)
            | Error::Corrupt(_)
            | Error::Volume { .. }
            | Error::Io { .. }
            | Error::Json { .. } => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
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
