use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("format error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown category `{category}`; known categories: {known}")]
    UnknownCategory { category: String, known: String },

    #[error("placement infeasible: {0}")]
    PlacementInfeasible(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("config error in {path}: {msg}")]
    Config { path: PathBuf, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
