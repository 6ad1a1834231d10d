//! Seed derivation for reproducible, independent RNG streams.
//!
//! Every random decision in a run is drawn from a stream keyed by the master
//! seed plus a tuple of tags (purpose, round, silo, batch, ...). Streams never
//! share state, so the order in which silos are scheduled cannot change any
//! draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Distinct tags keep otherwise equal tag tuples apart.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const CLIENT: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const CENTRAL: u64 = 5;
    pub const PAIR_SEEDS: u64 = 6;
    pub const PERSONAL: u64 = 7;
    pub const SPLIT: u64 = 8;
    pub const FINAL_EVAL: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base` to produce an independent 64-bit seed.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    rng(derive(base, tags))
}
