use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum IknoError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("trajectory of length {len} is too short for {needed} snapshots")]
    InsufficientLength { len: usize, needed: usize },

    #[error("degenerate target: sample {sample}, step {step} has zero norm")]
    DegenerateTarget { sample: usize, step: usize },

    #[error("non-finite value in {what} (epoch {epoch}, batch {batch})")]
    NonFinite {
        what: String,
        epoch: usize,
        batch: usize,
    },

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    Solver { iterations: usize, residual: f64 },

    #[error("gradient check failed: {0}")]
    CheckFailed(String),

    #[error("archive format error: {0}")]
    Format(String),

    #[error("output path {0} already exists")]
    PathExists(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IknoError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(IknoError::Shape(msg.into()))
}
