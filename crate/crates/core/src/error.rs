use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (resolution, channel/reduction mismatch, block counts).
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data violates a documented contract (shapes, label ranges, missing grades).
    #[error("validation error: {0}")]
    Validation(String),
    /// A non-finite value appeared where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An operation was invoked before its prerequisites were produced.
    #[error("state error: {0}")]
    State(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! validation_err {
    ($($arg:tt)*) => { $crate::error::Error::Validation(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use validation_err;
