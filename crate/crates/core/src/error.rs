use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("Gram matrix is numerically singular (min eigenvalue {min_eigenvalue:e}, max {max_eigenvalue:e})")]
    SingularGram {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("attention row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("corpus has {len} tokens, at least {needed} are required")]
    EmptyCorpus { len: usize, needed: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    DivergenceDetected { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> Error {
    Error::DimensionMismatch {
        op,
        detail: detail.into(),
    }
}

/// Returns `DimensionMismatch` unless `a` and `b` have identical shapes.
pub(crate) fn same_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(mismatch(op, format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1)))
    }
}
