use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{key}: {message}")]
    Config { key: String, message: String },

    #[error("cannot parse configuration: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error(transparent)]
    Core(#[from] sgdm_core::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
