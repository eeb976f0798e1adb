use thiserror::Error;

/// Errors produced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum LorsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric failure: {message}")]
    Numeric { message: String, residual: Option<f64> },

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LorsError>;

impl LorsError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        LorsError::Shape { op, left, right }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        LorsError::Argument(msg.into())
    }

    pub(crate) fn graph(msg: impl Into<String>) -> Self {
        LorsError::Graph(msg.into())
    }
}
