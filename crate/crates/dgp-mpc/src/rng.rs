//! Deterministic, counter-derived random-number streams.
//!
//! Every stochastic component draws from a [`ChaCha8Rng`] derived from the
//! run seed plus an explicit key path (e.g. `[PLAN, step, iter, particle]`).
//! Streams for different paths are disjoint, so parallel workers produce
//! results that do not depend on scheduling or worker count.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Domain tags keeping unrelated consumers of the same run seed apart.
pub mod scope {
    pub const ENV: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const PLAN: u64 = 3;
    pub const INIT: u64 = 4;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a root seed with a key path into a single stream seed.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ 0x6a09_e667_f3bc_c908);
    for &word in path {
        h = splitmix64(h ^ splitmix64(word));
    }
    h
}

/// Returns the RNG stream for `(root, path)`.
pub fn stream(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}

/// Fills a `rows x cols` matrix with independent standard-normal draws in
/// row-major order.
pub fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}
