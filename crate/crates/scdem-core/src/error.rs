use thiserror::Error;

/// Error variants shared across the whole engine.
#[derive(Debug, Error)]
pub enum ScdemError {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("index out of range in {op}: {index} not in [0, {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("checkpoint version mismatch: file has {found}, this build reads {supported}")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("checkpoint integrity error: {0}")]
    CheckpointIntegrity(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ScdemError>;

impl ScdemError {
    pub fn dimension(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        ScdemError::Dimension {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
