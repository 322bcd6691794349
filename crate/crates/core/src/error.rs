use thiserror::Error;

/// Errors raised by mesh, spline and fitting operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("internal consistency failure: {0}")]
    Consistency(String),
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("unsupported input: {0}")]
    Unsupported(String),
    #[error("degenerate adaptive nodes: {0}")]
    DegenerateNodes(String),
    #[error("spline is not in the space: {0}")]
    NotInSpace(String),
}

impl Error {
    /// True for failures that indicate a broken internal invariant rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Consistency(_) | Error::Numeric(_) | Error::DegenerateNodes(_) | Error::NotInSpace(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
