//! Crate-wide error type with process exit-code mapping for the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A config or input field violated its documented invariant.
    #[error("validation error: {field}: {msg}")]
    Validation { field: String, msg: String },

    /// A masking policy is unsatisfiable after flooring.
    #[error("policy error: {0}")]
    Policy(String),

    /// Tensor or grid shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A `.vol` file or checkpoint container is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint was produced under an incompatible configuration.
    #[error("config mismatch: {field}: checkpoint has {actual}, expected {expected}")]
    ConfigMismatch {
        field: String,
        expected: String,
        actual: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Training produced a non-finite loss; carries the component dump.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("single-class label set: AUC undefined")]
    SingleClass,
}

impl Error {
    pub fn validation(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// Exit code contract: 0 success, 2 usage, 3 validation, 4 I/O, 5 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. }
            | Error::Policy(_)
            | Error::Shape(_)
            | Error::ConfigMismatch { .. }
            | Error::SingleClass => 3,
            Error::Format(_) | Error::Io(_) => 4,
            Error::Numerical(_) => 5,
        }
    }
}
