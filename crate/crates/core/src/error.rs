use thiserror::Error;
use trajdiff_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("agent {0} has no future trajectory")]
    MissingFuture(i64),
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status for command-line use: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::Numeric(_) => 4,
            Error::Tensor(e) if e.is_numeric() => 4,
            Error::Tensor(TensorError::Io(_)) => 3,
            Error::Tensor(_) => 2,
            _ => 3,
        }
    }

    pub fn is_numeric(&self) -> bool {
        self.exit_code() == 4
    }
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Length { expected, got })
    }
}
