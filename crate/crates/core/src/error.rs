use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures reading or validating a `CDEC1` container file.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected \"CDEC1\\0\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("wrong section tag: expected {expected}, found {found}")]
    WrongSection { expected: u8, found: u8 },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("inconsistent contents: {0}")]
    Inconsistent(String),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("lineage error: {0}")]
    Lineage(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid template: {0}")]
    Template(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Dimension { op, lhs, rhs }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
