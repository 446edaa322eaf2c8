use thiserror::Error;

/// Errors surfaced by the tensor substrate, models, data handling, and harness.
#[derive(Debug, Error)]
pub enum GcError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("data integrity error: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl GcError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        GcError::Io { path: path.into(), source }
    }
}
