use thiserror::Error;

pub type Result<T> = std::result::Result<T, CometError>;

#[derive(Debug, Error)]
pub enum CometError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("window too short: length {len} < required {required}")]
    WindowTooShort { len: usize, required: usize },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u32 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CometError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CometError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CometError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
