use std::fmt;

/// Error category for the toolkit. The CLI maps each variant onto a fixed
/// process exit code, so keep the classification stable: configuration and
/// shape problems are `Config`, file/dataset problems are `Data`, and
/// non-finite or otherwise invalid numerics are `Numeric`.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration, model spec, or shape mismatch (exit code 1).
    Config(String),
    /// Dataset, checkpoint, or file-format problem (exit code 2).
    Data(String),
    /// Numerical failure: non-finite values, invalid parameters (exit code 3).
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Data(format!("io: {err}"))
    }
}
