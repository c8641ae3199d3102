//! Named random streams derived from a single root seed.
//!
//! Every consumer of randomness (shuffling, subsampling, initialization, ...)
//! asks for its own stream by name, so changing how much randomness one
//! stage draws never perturbs another stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the stream `purpose` under `root`.
pub fn stream_seed(root: u64, purpose: &str) -> u64 {
    mix64(root ^ fnv1a(purpose.as_bytes()))
}

pub fn stream(root: u64, purpose: &str) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(root, purpose))
}

/// Deterministic child seed, e.g. for the `index`-th repeat of a sweep.
pub fn child_seed(root: u64, index: u64) -> u64 {
    mix64(root.wrapping_add(mix64(index.wrapping_add(1))))
}
