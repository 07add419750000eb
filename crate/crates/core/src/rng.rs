//! Counter-based randomness.
//!
//! Every draw is keyed by `(seed, stream, counter)`; there is no shared
//! generator state, so any sample's randomness can be reproduced in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named streams. Values are part of the on-disk determinism contract.
pub mod stream {
    pub const CLASS_MEANS: u64 = 1;
    pub const PROJECTION_A: u64 = 2;
    pub const PROJECTION_B: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const VIEWS: u64 = 8;
    pub const PROBE: u64 = 9;
    pub const CHECK: u64 = 10;
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine any number of counters into one key.
pub fn key(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3, |acc, &p| mix(acc ^ mix(p)))
}

/// Fresh generator for `(seed, stream, counters...)`.
pub fn rng_for(seed: u64, stream: u64, counters: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(key(&[&[seed], counters].concat()));
    rng.set_stream(stream);
    rng
}
