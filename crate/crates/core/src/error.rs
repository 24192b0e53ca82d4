//! Error taxonomy shared by every module.
//!
//! The CLI maps these onto process exit codes, so the variants are grouped
//! by failure class rather than by module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DvdError {
    /// Tensor/network dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller-supplied value is out of its allowed range (k, alpha, m, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Bad input data: labels out of range, degenerate (zero-norm) features,
    /// empty datasets.
    #[error("data error: {0}")]
    Data(String),

    /// Operation called in the wrong order (e.g. backward without forward).
    #[error("state error: {0}")]
    State(String),

    /// A frozen-parameter or checkpoint-role contract was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite value encountered where the pipeline requires finite math.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed file; `offset` is the byte position where parsing failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DvdError>;

impl DvdError {
    /// Exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            DvdError::Parameter(_) | DvdError::Shape(_) => 2,
            DvdError::Data(_) | DvdError::Format { .. } | DvdError::Io(_) => 3,
            DvdError::Contract(_) | DvdError::State(_) => 4,
            DvdError::Numeric(_) => 5,
        }
    }
}
