//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha12, keyed by a 64-bit seed
//! and addressed by a 64-bit stream number. A stream is a pure function of
//! `(seed, purpose, index)`, so frames, trials and batches can be generated in
//! any order (or in parallel) with identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

/// Stream `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Stream `index` of the sub-generator named `purpose`.
///
/// Distinct purposes give unrelated key material even for the same seed.
pub fn named(seed: u64, purpose: &str, index: u64) -> StreamRng {
    stream(splitmix64(seed ^ fnv1a(purpose.as_bytes())), index)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
