//! Joint fusion encoder for multi-modal dense retrieval.
//!
//! A single transformer encodes the vision block, the text block and an
//! optional instruction together, and the final hidden state of a reserved
//! `[Emb]` token is the retrieval embedding. The crate also carries a
//! two-tower baseline with late-fusion combiners, low-rank adapters, the
//! InfoNCE objective, a dataset-count batch sampler, exact top-k retrieval
//! with Recall@K evaluation, and a synthetic multi-modal world used to test
//! all of it.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the command
//! line and everything else touching the operating system live in the `jfe`
//! companion crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
#![warn(missing_debug_implementations)]

extern crate alloc;

pub mod adapters;
pub mod assembly;
pub mod data;
pub mod encoder;
mod error;
pub mod eval;
pub mod numerics;
pub mod objective;
pub mod retrieval;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};

/// Deterministic generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    <Rng as rand::SeedableRng>::seed_from_u64(seed)
}
