//! Seed derivation and sampling helpers.
//!
//! Every random stream in the simulator is a `ChaCha8Rng` seeded from a master
//! seed plus a tuple of integer tags, so results never depend on call order or
//! thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Scalar;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `tags` into `master` to obtain an independent stream seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(master: u64, tags: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, tags))
}

/// Stream tags, kept distinct so that different consumers of one master seed
/// never share a stream.
pub mod stream {
    pub const PARTITION: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const CLIENT_SAMPLE: u64 = 3;
    pub const LOCAL_UPDATE: u64 = 4;
    pub const GENERATE_PROBLEM: u64 = 5;
    pub const SYNTH_FIT: u64 = 6;
    pub const SYNTH_SAMPLE: u64 = 7;
    pub const SYNTH_SERVER: u64 = 8;
    pub const HETERO: u64 = 9;
    pub const SUBSAMPLE: u64 = 10;
    pub const INIT: u64 = 11;
}

#[inline]
pub fn standard_normal<S: Scalar, R: Rng + ?Sized>(rng: &mut R) -> S {
    let z: f64 = rng.sample(StandardNormal);
    S::of(z)
}

/// Fills `out` with draws from N(0, variance).
pub fn fill_gaussian<S: Scalar, R: Rng + ?Sized>(rng: &mut R, variance: S, out: &mut [S]) {
    let sd = variance.sqrt();
    for v in out.iter_mut() {
        *v = sd * standard_normal::<S, _>(rng);
    }
}

/// Uniform sample of `k` distinct indices from `0..n`, returned in ascending order.
pub fn sample_indices<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Half-to-even rounding of `p * n`, the count convention used for every
/// "fraction of a client" quantity.
pub fn fraction_count(p: f64, n: usize) -> usize {
    (p * n as f64).round_ties_even().max(0.0) as usize
}
