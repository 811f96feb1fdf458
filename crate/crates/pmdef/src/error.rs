use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] pmdef_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("required file {0} does not exist")]
    MissingFile(PathBuf),

    #[error("{what}: bad magic {found:#x}, expected {expected:#x}")]
    BadMagic { what: String, expected: u64, found: u64 },

    #[error("{what}: truncated at byte {offset}, needed {needed} more bytes")]
    Truncated { what: String, offset: usize, needed: usize },

    #[error("{what}: checksum mismatch")]
    Checksum { what: String },

    #[error("{what}: {reason}")]
    Format { what: String, reason: String },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {label} at record {index} is out of range for {classes} classes")]
    LabelRange { index: usize, label: u8, classes: usize },

    #[error("{what}: invalid JSON header: {source}")]
    HeaderJson {
        what: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("checkpoint spec {found:?} does not match the expected spec {expected:?}")]
    SpecMismatch { expected: String, found: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from invalid input (exit code 1) rather than
    /// a failure while running (exit code 2).
    pub fn is_validation(&self) -> bool {
        use pmdef_core::Error as C;
        match self {
            Error::Core(C::Divergence { .. } | C::Evaluation(_)) => false,
            Error::Core(_) => true,
            Error::Io { .. } | Error::Csv(_) | Error::Json(_) => false,
            _ => true,
        }
    }
}
