use thiserror::Error;

pub type Result<T, E = NfmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NfmError {
    #[error("empty sequence")]
    EmptySequence,

    #[error("non-realizable spectrum: {0}")]
    NonRealizable(String),

    #[error("incompatible factors: {0}")]
    IncompatibleFactors(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl NfmError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        NfmError::InvalidArgument(msg.into())
    }
}
