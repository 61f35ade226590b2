use ppf_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PpfError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PpfError> = std::result::Result<T, E>;
