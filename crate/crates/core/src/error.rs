use thiserror::Error;

/// Errors raised by the design, sampling, estimation and ingestion layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument violated a documented domain restriction.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// The request cannot be satisfied (e.g. fewer positive weights than the budget).
    #[error("infeasible: {0}")]
    Infeasible(String),
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An iterative routine gave up.
    #[error("did not converge: {0}")]
    NoConvergence(String),
    #[error("csv error at row {row}, column `{column}`: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
