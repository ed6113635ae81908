//! Derived random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by a tuple
//! such as `(seed, step, item, purpose)`, so results never depend on the
//! order in which items are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream identified by `parts`.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6B65_6469_6666_0001, |h, &p| splitmix(h ^ splitmix(p)))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Stream purposes.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const DATA: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const PROJECTION: u64 = 7;
    pub const EVAL: u64 = 8;
}
