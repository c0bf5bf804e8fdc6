//! Seeded random streams.
//!
//! Every stochastic component draws from ChaCha8, a counter-based stream
//! cipher generator. A run seed plus a stream id fully determines a
//! sequence, so independent consumers (per-draw noise, per-seed runs,
//! samplers) get reproducible, non-overlapping substreams without sharing
//! state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type GaiaRng = ChaCha8Rng;

/// Generator for stream 0 of `seed`.
pub fn seeded(seed: u64) -> GaiaRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for an independent substream of `seed`.
pub fn substream(seed: u64, stream: u64) -> GaiaRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Well-known stream ids, so call sites do not collide by accident.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const BNN_INIT: u64 = 2;
    pub const BNN_SAMPLER: u64 = 3;
    pub const BNN_NOISE: u64 = 4;
    pub const BNN_EVAL: u64 = 5;
    pub const TEST_EVAL: u64 = 6;
    pub const GAIA_SAMPLER: u64 = 7;
    pub const PREDICTORS: u64 = 8;
}
