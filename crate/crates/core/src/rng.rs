//! Deterministic RNG derivation.
//!
//! Every stochastic step derives its own generator from the user seed plus a
//! list of context tags (purpose, outer iteration, trial index, draw index).
//! Trials can then be processed in any order or in parallel and still produce
//! bit-identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for the independent random substreams of a fit.
pub mod streams {
    pub const INIT_PARAMS: u64 = 1;
    pub const COEF_SAMPLE: u64 = 2;
    pub const GAMMA_RESIDUAL: u64 = 3;
    pub const ELBO: u64 = 4;
    pub const DATAGEN: u64 = 5;
    pub const OBS_LIFT: u64 = 6;
    pub const SEARCH: u64 = 7;
    pub const MSTEP: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `seed` and `tags` into a single 64-bit stream seed.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix64(seed);
    for &t in tags {
        acc = splitmix64(acc ^ splitmix64(t));
    }
    acc
}

/// Derives a self-contained generator for the substream named by `tags`.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tags))
}
