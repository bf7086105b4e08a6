use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("file format: {0}")]
    Format(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable one-word category, used by the CLI for machine-parsable
    /// error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Empty(_) => "empty",
            Error::Parameter(_) => "parameter",
            Error::Format(_) => "format",
            Error::Numerical(_) => "numerical",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}
