//! Privacy-preserving adaptive score normalisation for speaker verification:
//! binary-key cohort pruning under two-party secret sharing, PLDA scoring
//! under Paillier encryption, and the supporting synthetic corpus, metrics
//! and benchmark harness.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod binarykey;
pub mod bits;
pub mod error;
pub mod format;
pub mod gmm;
pub mod linalg;
pub mod metrics;
pub mod paillier;
pub mod pipeline;
pub mod plda;
pub mod rng;
pub mod smpc;
pub mod synth;
pub mod transport;

pub use error::{Error, Result};
