use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("threshold rule error: {0}")]
    Rule(String),
    #[error("training error: {0}")]
    Training(String),
    #[error(transparent)]
    Nn(#[from] spes_nn::NnError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
