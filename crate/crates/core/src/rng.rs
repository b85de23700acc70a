//! Deterministic random streams.
//!
//! Every logical sampling task (one time point of a Gibbs E-step, one
//! replicate of an experiment, ...) draws from its own ChaCha stream keyed by
//! `(master seed, domain tag, index)`. Results therefore do not depend on how
//! tasks are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream type used throughout the crate.
pub type Stream = ChaCha8Rng;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

/// Derive a child seed from a parent seed and a textual label plus index.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let a = mix64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let b = mix64(a ^ fnv1a64(tag.as_bytes()));
    mix64(b ^ index.wrapping_mul(0xD134_2543_DE82_EF95))
}

/// Open the stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, 0));
    rng.set_stream(index);
    rng
}
