//! Two-party Boolean secret sharing and the secure pruning stack.

pub mod circuit;
pub mod dealer;
pub mod gmw;
pub mod prune;
pub mod share;

pub use circuit::{Circuit, CircuitBuilder, Gate, Wire};
pub use dealer::{deal_triples, deal_zero_triples, TripleBlock, TriplePool};
pub use gmw::PartyCtx;
pub use prune::{
    audit_transcript, predict_prune_cost, run_prune_on_shares, run_secure_prune, secure_prune, top_n_select, PruneCost, PruneOptions,
    PruneResult, PruneSession,
};
pub use share::{read_shares, reconstruct, rerandomize, share_bits, write_shares, BooleanShare};
