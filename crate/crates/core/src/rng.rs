//! Seeded random streams.
//!
//! Every stochastic component draws from ChaCha20 (a counter-based stream
//! cipher generator) keyed by the user seed. Independent consumers use
//! distinct stream ids so that, for example, changing the dropout rate does
//! not perturb the shuffle order or the weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type StreamRng = ChaCha20Rng;

/// Stream ids for the consumers used in this crate.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const SYNTHETIC: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const GRAD_CHECK: u64 = 6;
}

pub fn seeded(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
