//! Seeded randomness. Every stochastic choice in the workspace draws from a
//! ChaCha8 stream seeded with a `u64`, so runs are bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Scalar, Tensor};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor with i.i.d. `N(0, std²)` entries.
pub fn normal<T: Scalar>(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z * std)
    })
}
