use thiserror::Error;

use crate::field::Basis;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum UmiError {
    #[error("rejected input: {0}")]
    InvalidInput(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("aliasing bound undefined: at least two transmit angles are required")]
    UndefinedBound,
    #[error("basis mismatch: expected {expected:?}, found {found:?}")]
    BasisMismatch { expected: Basis, found: Basis },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("window contains no focal points")]
    EmptyWindow,
    #[error("phantom contains no scatterers")]
    EmptyPhantom,
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, UmiError>;
