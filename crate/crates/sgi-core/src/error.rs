use alloc::string::String;
use core::fmt;

/// Error surface shared by the whole core crate.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor/shape mismatch (inner dimensions, kernel larger than input, ...).
    Dim(String),
    /// Out-of-range index (action labels, episode offsets, ...).
    Index(String),
    /// A call-contract violation (missing gradient, step after done, ...).
    Contract(String),
    /// Bad argument value (empty dataset, empty objective mask, ...).
    Argument(String),
    /// A forward evaluation produced NaN/Inf.
    NonFinite(String),
    /// Zero-norm vector where a direction is required.
    ZeroNorm(String),
    /// Incompatible checkpoint or dataset contents.
    Format(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Dim(m) => write!(f, "dimension error: {m}"),
            CoreError::Index(m) => write!(f, "index error: {m}"),
            CoreError::Contract(m) => write!(f, "contract error: {m}"),
            CoreError::Argument(m) => write!(f, "argument error: {m}"),
            CoreError::NonFinite(m) => write!(f, "non-finite value: {m}"),
            CoreError::ZeroNorm(m) => write!(f, "zero-norm input: {m}"),
            CoreError::Format(m) => write!(f, "format error: {m}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

macro_rules! err_ctor {
    ($name:ident, $variant:ident) => {
        pub fn $name(msg: impl Into<String>) -> CoreError {
            CoreError::$variant(msg.into())
        }
    };
}

impl CoreError {
    err_ctor!(dim, Dim);
    err_ctor!(index, Index);
    err_ctor!(contract, Contract);
    err_ctor!(argument, Argument);
    err_ctor!(non_finite, NonFinite);
    err_ctor!(zero_norm, ZeroNorm);
    err_ctor!(format, Format);
}
