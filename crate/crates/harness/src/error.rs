use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Config or argument validation; the message names the offending field.
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    /// Input CSV does not match the expected columns.
    #[error("schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Core(#[from] popest::Error),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
