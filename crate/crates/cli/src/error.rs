use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] toplora::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit status for this error: 3 for numeric failures, 2 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(toplora::Error::Divergence { .. } | toplora::Error::RankDeficient { .. }) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
