//! Seed derivation.
//!
//! Every random stream in the pipeline is derived from one root seed:
//! `derive(root, label) = splitmix64(root ^ fnv1a64(label))`, and per-item
//! streams (for example one RANSAC run per image pair) chain further with
//! [`derive_pair`]. Streams are ChaCha8 so outputs are stable across
//! platforms and `rand` releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(label: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn derive(root: u64, label: &str) -> u64 {
    splitmix64(root ^ fnv1a64(label))
}

pub fn derive_pair(root: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(root ^ a).wrapping_add(b))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
