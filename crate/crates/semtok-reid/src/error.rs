//! Crate-wide error type.
//!
//! Variants map onto the CLI exit codes: configuration/usage problems exit
//! with 2, data and file-format problems with 3, numeric failures with 4.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Incompatible tensor shapes, naming both operands.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An index (camera id, row id, ...) outside its valid range.
    #[error("{what} index {index} out of range (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// Invalid configuration or parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A violated API contract (non-scalar loss, singleton triplet label, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Dataset-level problems (missing identities, bad splits, ...).
    #[error("dataset error: {0}")]
    Data(String),

    /// Binary file-format problems, with the offending byte offset.
    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    /// Non-finite values or a failed numeric check.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 usage/config, 3 data/format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
