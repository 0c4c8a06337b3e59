//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MlsError>;

#[derive(Debug, Error)]
pub enum MlsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty tensor: {0}")]
    EmptyTensor(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("accumulator overflow: {0}")]
    AccumulatorOverflow(String),

    #[error("wide accumulator overflow: {0}")]
    WideOverflow(String),

    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl MlsError {
    /// Process exit code contract used by the CLI: 0 ok, 1 runtime,
    /// 2 usage/IO, 3 numeric overflow.
    pub fn exit_code(&self) -> i32 {
        match self {
            MlsError::AccumulatorOverflow(_) | MlsError::WideOverflow(_) => 3,
            MlsError::Io(_) | MlsError::Format { .. } | MlsError::Config { .. } => 2,
            _ => 1,
        }
    }
}
