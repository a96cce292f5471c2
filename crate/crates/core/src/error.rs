use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    Dimension {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate cohort statistics for {id}: standard deviation is zero")]
    DegenerateStats { id: String },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("key mismatch: ciphertext key {found:016x}, expected {expected:016x}")]
    KeyMismatch { expected: u64, found: u64 },

    #[error("scoring form mismatch: template form {found:016x}, expected {expected:016x}")]
    FormMismatch { expected: u64, found: u64 },

    #[error("fixed-point overflow: {0}")]
    Overflow(String),

    #[error("plaintext out of range [0, n)")]
    PlaintextOutOfRange,

    #[error("prime generation failed after {0} attempts")]
    PrimeGeneration(usize),

    #[error("triple pool exhausted: requested {requested}, {remaining} remaining")]
    TripleExhaustion { requested: usize, remaining: usize },

    #[error("share tag mismatch: {left:016x} vs {right:016x}")]
    TagMismatch { left: u64, right: u64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("channel closed")]
    ChannelClosed,

    #[error("frame too large: {0} bytes")]
    FrameTooLarge(usize),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("metric requires both target and non-target trials")]
    SingleClass,

    #[error("zero denominator in {0}")]
    ZeroDenominator(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(expected: usize, actual: usize, context: &'static str) -> Self {
        Error::Dimension {
            expected,
            actual,
            context,
        }
    }
}
