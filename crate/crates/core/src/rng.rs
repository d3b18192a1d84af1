//! Seed derivation.
//!
//! Every stochastic choice in the crate draws from a ChaCha8 stream whose
//! seed is derived from a parent seed and a list of integer coordinates.
//! The mixing function is SplitMix64's finalizer folded over the
//! coordinates, so derived seeds are stable across platforms and releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `parent` and an ordered list of coordinates.
pub fn derive_seed(parent: u64, coords: &[u64]) -> u64 {
    let mut h = mix(parent.wrapping_add(GOLDEN));
    for &c in coords {
        h = mix(h ^ c
            .wrapping_add(GOLDEN)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2));
    }
    h
}

/// Hashes a string label into a coordinate (FNV-1a).
pub fn label_coord(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn rng_for(parent: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, coords))
}
