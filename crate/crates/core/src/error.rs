use thiserror::Error;

pub type Result<T, E = DlfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DlfError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A malformed input row; `line` is 1-based and counts the header.
    #[error("line {line}: {message}")]
    Row { line: usize, message: String },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("schema hash mismatch: expected {expected:016x}, found {found:016x}")]
    SchemaMismatch { expected: u64, found: u64 },

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DlfError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        DlfError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DlfError::Config(msg.into())
    }
}
