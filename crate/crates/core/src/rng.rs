//! Counter-based RNG streams.
//!
//! Every stochastic routine derives its generator from a master seed and a
//! stream index, so results are reproducible and independent of thread
//! schedule: rollout `i` always consumes stream `i` no matter which worker
//! runs it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A seeded generator on its own stream.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Two-level stream derivation for nested loops (round, rollout).
pub fn substream(seed: u64, outer: u64, inner: u64) -> ChaCha8Rng {
    stream(seed, outer.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ inner)
}
