use std::path::PathBuf;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero-norm {what} at index {index}")]
    ZeroNorm { what: &'static str, index: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid label row {row}: {reason}")]
    InvalidLabel { row: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic in {path}: expected \"LTF1\"")]
    BadMagic { path: PathBuf },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("dtype mismatch in {path}: expected {expected}, found {found}")]
    DTypeMismatch {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },

    #[error("malformed file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("hard-class table is stale (built for epoch {table_epoch}, current epoch {epoch})")]
    StaleTable { table_epoch: usize, epoch: usize },

    #[error("{0}")]
    State(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite(_) => ErrorKind::Numeric,
            Error::Config(_) | Error::InvalidArgument(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
