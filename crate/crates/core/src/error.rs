use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is below 1e-12")]
    ZeroNorm,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("non-finite value encountered: {0}")]
    NonFiniteValue(String),
    #[error("anchor {anchor} has no matching candidate")]
    NoPositive { anchor: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("loss term `{0}` is not finite")]
    NonFiniteTerm(&'static str),
    #[error("input sequence is empty")]
    EmptyInput,
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("dataset has no training samples")]
    EmptyDataset,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("proportion must lie in [0, 1], got {0}")]
    InvalidProportion(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
