//! Deterministic seed splitting.
//!
//! One root seed feeds every random stream in a run. Each consumer derives its
//! own sub-seed from the root and a tag (plus optional integer coordinates),
//! so adding a new consumer never perturbs existing streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives a sub-seed from `root`, a module tag and integer coordinates.
pub fn derive(root: u64, tag: &str, coords: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ fnv1a(tag));
    for &c in coords {
        h = splitmix64(h ^ c);
    }
    h
}

pub fn rng(root: u64, tag: &str, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, tag, coords))
}
