use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checksum mismatch in {path}: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("unsupported {what} version {found} (this build reads version {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("missing dependency: {} (run the step that produces it first)", .0.display())]
    MissingArtifact(PathBuf),

    #[error("component hash mismatch for {component}: checkpoint expects {expected}, found {found}")]
    HashMismatch {
        component: String,
        expected: String,
        found: String,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Coarse category used by the command line for exit codes and error tags.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Validation(_) | Error::Shape { .. } | Error::Parse(_) => ErrorKind::Validation,
            Error::MissingArtifact(_) => ErrorKind::Dependency,
            Error::Io { .. }
            | Error::Checksum { .. }
            | Error::Version { .. }
            | Error::HashMismatch { .. }
            | Error::NonFinite(_) => ErrorKind::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Dependency,
    Runtime,
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
