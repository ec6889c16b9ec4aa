use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("corrupt grid: {0}")]
    CorruptGrid(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("context error: {0}")]
    Context(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by broken internal invariants rather than by
    /// bad inputs.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Invariant(_) | Error::Divergence(_))
    }
}
