//! Deterministic random streams.
//!
//! Every consumer draws from its own ChaCha8 stream so that adding or removing
//! draws in one place never shifts the sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub mod stream {
    pub const SHUFFLE: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const GATE: u64 = 3;
    pub const OCCLUDE: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const ERASE: u64 = 6;
    pub const GLYPH: u64 = 7;
    pub const BACKGROUND: u64 = 8;
    pub const PLACEMENT: u64 = 9;
}

pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fold several integers into one well-mixed seed (splitmix64 finalizer).
pub fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}
