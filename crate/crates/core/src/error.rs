use std::path::PathBuf;

use thiserror::Error;

use crate::domain::Violation;

pub type Result<T, E = CplError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CplError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("{}: format error at byte {offset}: {message}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("dataset invalid ({} violation(s)): {}", .0.len(), join_violations(.0))]
    InvalidDataset(Vec<Violation>),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{}: not a checkpoint (bad magic bytes)", path.display())]
    NotCheckpoint { path: PathBuf },

    #[error("{}: unsupported format version {found} (expected {expected})", path.display())]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CplError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CplError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CplError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CplError::Config(msg.into())
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
