//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator keyed by a master
//! seed and a stream index, so independent branches (per pair, per training
//! step, per module) can be reproduced without replaying earlier draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream indices reserved for the top-level pipeline stages.
pub mod streams {
    pub const TRAJECTORY: u64 = 1;
    pub const CONDITION: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const INFER: u64 = 4;
    pub const INIT: u64 = 5;
    pub const DATASET: u64 = 6;
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for `(master, stream)`.
pub fn derive(master: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// Mixes two indices into a single seed (splitmix64 finalizer).
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
