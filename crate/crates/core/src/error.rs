use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Two objects that must agree in dimension do not.
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    /// A region table does not describe the data it is used with.
    #[error("integrity violation: {0}")]
    Integrity(String),

    /// A theorem's assumption does not hold for the given inputs.
    #[error("precondition failed for region {region}: {reason}")]
    Precondition { region: usize, reason: String },

    /// A serialized model could not be decoded.
    #[error("model format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            found,
        })
    }
}
