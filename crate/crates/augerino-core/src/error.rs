use thiserror::Error;

/// Errors produced by the tensor engine and the modules built on top of it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-deterministic closure passed to grad_check")]
    NonDeterministic,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("missing gradient on parameter {0}")]
    MissingGrad(usize),
}

pub type Result<T> = std::result::Result<T, Error>;
