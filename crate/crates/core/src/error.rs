use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidOperand { op: &'static str, msg: String },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid value for {name}: {msg}")]
    InvalidArgument { name: &'static str, msg: String },

    #[error("sequence contains the mask symbol at position {position}")]
    MaskedSequence { position: usize },

    #[error("token {token} at position {position} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange {
        token: u32,
        position: usize,
        vocab: usize,
    },

    #[error("unknown class {class} (dataset has {classes} classes)")]
    UnknownClass { class: usize, classes: usize },

    #[error("decoder is not injective: sequences {a:?} and {b:?} of class {class} decode within {distance:e}")]
    DecoderCollision {
        class: usize,
        a: Vec<u32>,
        b: Vec<u32>,
        distance: f64,
    },

    #[error("sequence space of size {size} is too large for exact enumeration (limit {limit}); use the Fréchet proxy instead")]
    EnumerationTooLarge { size: f64, limit: usize },
}

impl Error {
    pub(crate) fn arg(name: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            msg: msg.into(),
        }
    }

    pub(crate) fn operand(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidOperand {
            op,
            msg: msg.into(),
        }
    }
}
