//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator seeded from a
//! user seed and positioned on a purpose-specific stream, so that e.g. the
//! measurement matrix does not change when the batch size does.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Matrix = 1,
    Signals = 2,
    Noise = 3,
    Training = 4,
    Validation = 5,
    Realization = 6,
}

/// A generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Derives an independent child seed, e.g. one per realization or per batch.
///
/// SplitMix64 finalizer over `seed ^ f(index)`.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
