//! Seeded random streams.
//!
//! All randomness goes through ChaCha8 keyed by a 64-bit seed and selected by
//! a stream id, so a draw depends only on `(seed, stream, position)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type EngineRng = ChaCha8Rng;

/// Stream ids used across the crate. Distinct purposes never share a stream.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const CROP: u64 = 4;
    pub const GEOMETRY: u64 = 0x100;
    pub const STYLE: u64 = 0x200;
}

pub fn seeded(seed: u64, stream: u64) -> EngineRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed from a parent seed and an index (splitmix64 finaliser).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
