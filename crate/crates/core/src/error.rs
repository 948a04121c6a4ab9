use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on {axis}: expected {expected}, got {actual}")]
    ShapeMismatch {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate descriptor")]
    DegenerateDescriptor,
    #[error("coordinate out of range: {0}")]
    Coordinate(String),
    #[error("empty query set")]
    EmptyQuerySet,
    #[error("malformed {format}: {reason}")]
    Format { format: &'static str, reason: String },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn format_err(format: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        format,
        reason: reason.into(),
    }
}

pub(crate) fn expect_dim(axis: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            axis,
            expected,
            actual,
        })
    }
}
