//! Error taxonomy shared by the library and the CLI.
//!
//! Every fallible operation returns [`Result`]. The CLI maps each variant to a
//! stable process exit code so scripts can distinguish bad configuration from
//! bad data from numerical failure.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All error conditions surfaced by the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (also covers malformed config files).
    #[error("config error: {0}")]
    Config(String),

    /// Problems with input data: missing files, parse failures, datasets that
    /// violate preconditions (too few points, empty clouds, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure: non-finite losses, degenerate geometry that cannot
    /// be normalized, gradient checks that exceed tolerance.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Shape or contract violation in a tensor/tape operation. Messages always
    /// name the offending shapes or indices.
    #[error("shape error: {0}")]
    Shape(String),
}

impl Error {
    /// Convenience constructors keep call sites terse.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code used by the CLI: 2 config, 3 data, 4 numeric.
    /// Shape errors indicate a misconfigured pipeline and map to 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Data(format!("i/o failure: {e}"))
    }
}
