use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("attention row {row} has no allowed keys")]
    DegenerateRow { row: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("graph has already been freed")]
    GraphFreed,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot merge checkpoints: tensor `{tensor}`: {reason}")]
    Merge { tensor: String, reason: String },
    #[error("kv cache holds {cached} positions but decode state expects {expected}")]
    CacheDesync { cached: usize, expected: usize },
    /// The batch has no masked tokens to supervise; callers skip it.
    #[error("batch contains no masked tokens")]
    NothingMasked,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
