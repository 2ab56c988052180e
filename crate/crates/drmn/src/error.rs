//! Crate-wide error type with process exit-code mapping.

/// Errors surfaced by the library and mapped to CLI exit codes:
/// usage errors exit 2, data errors 3, numeric failures 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Data(_) => "data",
            Error::Io(_) => "io",
            Error::Numeric(_) => "numeric",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
