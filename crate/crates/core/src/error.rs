use alloc::string::String;
use core::fmt;

/// Errors produced by the core pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A caller-supplied argument is outside the accepted domain.
    InvalidArgument(String),
    /// Two inputs that must agree (shapes, patch keys, widths) do not.
    InvariantViolation(String),
    /// Configuration is inconsistent, incomplete or references missing tensors.
    Config(String),
    /// An operation received no usable input (e.g. no foreground patches).
    EmptyInput(String),
    /// Training produced a non-finite loss.
    NonFinite {
        step: u64,
        last_good_step: Option<u64>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::InvariantViolation(m) => write!(f, "invariant violation: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::EmptyInput(m) => write!(f, "empty input: {m}"),
            Error::NonFinite {
                step,
                last_good_step,
            } => match last_good_step {
                Some(good) => write!(
                    f,
                    "non-finite loss at step {step}; last good checkpoint at step {good}"
                ),
                None => write!(
                    f,
                    "non-finite loss at step {step}; no checkpoint written yet"
                ),
            },
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
