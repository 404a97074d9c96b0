use thiserror::Error;

/// Failure classes of a run, each with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or inconsistent configuration (exit 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// A numerical routine failed outright (exit 1).
    #[error(transparent)]
    Numerical(#[from] fracmet_core::Error),
    /// Output could not be written (exit 1).
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}
