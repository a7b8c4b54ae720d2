//! Named random sub-streams.
//!
//! Every stochastic stage draws from a ChaCha stream keyed by the master
//! seed, a stage name and a tuple of integers (epoch, layer, entity, ...).
//! Any single stage is therefore reproducible in isolation, and the
//! streams are stable across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// 64-bit key for `(seed, name, path...)`.
pub fn stream_key(seed: u64, name: &str, path: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ fnv1a(name));
    for &p in path {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn stream(seed: u64, name: &str, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, name, path))
}
