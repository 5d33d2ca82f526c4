use alloc::string::String;
use core::fmt;

/// Errors raised by the tensor engine and the models built on it.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not satisfy an operation's contract.
    Shape {
        op: &'static str,
        lhs: alloc::vec::Vec<usize>,
        rhs: alloc::vec::Vec<usize>,
    },
    /// An operation produced NaN or infinity.
    NonFinite { op: &'static str },
    /// Invalid hyper-parameter or configuration value.
    Config(String),
    /// Misuse of a differentiation graph (double backward, non-scalar loss...).
    State(String),
    /// Dataset generation failed.
    Generation(String),
    /// Evaluation is undefined for the given inputs.
    Evaluation(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::NonFinite { op } => write!(f, "{op}: non-finite value in output"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::State(msg) => write!(f, "graph state error: {msg}"),
            Error::Generation(msg) => write!(f, "generation error: {msg}"),
            Error::Evaluation(msg) => write!(f, "evaluation error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
