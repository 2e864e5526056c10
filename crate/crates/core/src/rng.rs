//! Seeded random streams.
//!
//! Every consumer of randomness derives its generator from a `(seed, stream)`
//! pair so that independent consumers never share state and results do not
//! depend on call order across consumers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Named stream identifiers. Distinct values keep e.g. Fisher probes
/// independent of network initialisation under the same user seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const PHANTOM: u64 = 3;
    pub const COEFFS: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const RANDOM_BASIS: u64 = 6;
    /// Fisher probes use `FISHER_BASE + step` so each optimisation step gets
    /// its own counter-addressed stream.
    pub const FISHER_BASE: u64 = 1 << 32;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
