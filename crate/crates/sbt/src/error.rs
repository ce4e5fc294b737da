//! Error type shared across the library.
//!
//! The CLI maps these variants onto process exit codes, so the split between
//! "bad input", "bad data", and "numerical failure" is part of the public
//! contract rather than an implementation detail.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Caller passed an argument outside the documented domain.
    #[error("input error: {0}")]
    Input(String),

    /// An object was used in a state that does not support the operation
    /// (for example evaluating a tree whose leaf values were never drawn).
    #[error("state error: {0}")]
    State(String),

    /// A structural tree move was rejected by validation. Samplers treat
    /// this as an automatic proposal rejection.
    #[error("invalid move: {0}")]
    Move(String),

    /// Serialized model or tree text could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// A dataset file was malformed.
    #[error("data error: {0}")]
    Data(String),

    /// A numerical routine failed to produce a usable result.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// The box constraints admit no allocation summing to n.
    #[error("no feasible allocation")]
    NoFeasibleAllocation,

    /// Command line was self-inconsistent.
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command line front end:
    /// 2 usage, 3 data, 4 numerical/domain failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Data(_) | Error::Parse(_) | Error::Io(_) | Error::Input(_) => 3,
            Error::Numerical(_)
            | Error::NoFeasibleAllocation
            | Error::State(_)
            | Error::Move(_) => 4,
        }
    }
}
