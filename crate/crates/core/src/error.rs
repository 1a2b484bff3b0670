use std::path::PathBuf;

/// Errors surfaced by the library.
///
/// Every variant renders as a single line that starts with a short,
/// machine-parsable reason prefix (`config:`, `shape:`, `io:` ...). The CLI
/// prints exactly that line on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("shape: {0}")]
    Shape(String),

    #[error("invalid-input: {0}")]
    InvalidInput(String),

    #[error("no-trackable-objects: {0}")]
    NoTrackableObjects(String),

    #[error("unknown-dataset: {0}")]
    UnknownDataset(String),

    #[error("task-mismatch: {0}")]
    TaskMismatch(String),

    #[error("dataset: {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image: {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("json: {path}: {reason}")]
    Json { path: PathBuf, reason: String },

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Json {
            path: path.into(),
            reason: err.to_string().replace('\n', " "),
        }
    }
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
