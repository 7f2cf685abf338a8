//! Error type shared across the toolkit.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes; carries both shapes as (rows, cols).
    Dim {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    /// Bad configuration or CLI argument.
    Config(String),
    /// File parsing failed; line is 1-based.
    Parse { path: String, line: usize, msg: String },
    /// A val/test node reached the training tape in an inductive run.
    Leakage(String),
    /// Loss or parameter became non-finite.
    Numeric(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim { op, lhs, rhs } => {
                write!(f, "{op}: dimension mismatch {}x{} vs {}x{}", lhs.0, lhs.1, rhs.0, rhs.1)
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Parse { path, line, msg } => write!(f, "parse error at {path}:{line}: {msg}"),
            Error::Leakage(msg) => write!(f, "leakage abort: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 leakage, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Leakage(_) => 3,
            Error::Numeric(_) => 4,
            _ => 2,
        }
    }
}
