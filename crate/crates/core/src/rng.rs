//! Seeded RNG streams.
//!
//! Every stochastic routine in the crate takes either an explicit RNG or a
//! `(seed, stream)` pair. One ChaCha stream per output index keeps parallel
//! generation reproducible regardless of scheduling order.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// RNG for stream `index` of a run seeded with `seed`.
///
/// Streams are statistically independent; the same `(seed, index)` pair
/// always yields the same sequence.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Single-stream RNG for simple sequential use.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
