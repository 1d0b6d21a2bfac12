//! Seeded randomness. Every stochastic choice in the crate flows from a `u64`
//! seed through these helpers so runs are reproducible bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ndgrad::Tensor;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes `tag` into `seed` (splitmix64 finalizer) to get an independent stream.
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut SimRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut SimRng) -> Tensor {
    Tensor::from_fn(shape, |_| std * normal(rng))
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut SimRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}
