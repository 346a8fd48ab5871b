use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition (bad argument, mismatched
    /// geometry, out-of-range parameter). The message names the offending
    /// field and the admissible range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two independent numerical routes disagreed beyond their combined
    /// tolerance, or a computed quantity failed a sanity bound. Maps to CLI
    /// exit code 3.
    #[error("numerical consistency: {0}")]
    NumericalConsistency(String),

    /// Config parsing or validation failed. Maps to CLI exit code 2. The
    /// message lists every violated field, not just the first.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn inconsistent(msg: impl Into<String>) -> Self {
        Error::NumericalConsistency(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 for config errors, 3 for numerical
    /// consistency failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NumericalConsistency(_) => 3,
            _ => 1,
        }
    }
}
