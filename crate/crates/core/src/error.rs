use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code policy:
/// input/config problems exit 1, gate failures exit 2, everything else 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("quantizer spec error: {0}")]
    QuantSpec(String),
    #[error("approximator fit failed: {0}")]
    Fit(String),
    #[error("conversion error: {0}")]
    Conversion(String),
    #[error("audit error: {0}")]
    Audit(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("plasticity contract error: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Config(_) | Error::Argument(_) => 1,
            Error::Fit(_) | Error::Audit(_) => 2,
            _ => 3,
        }
    }
}
