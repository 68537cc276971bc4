use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Seeded weight initializer drawing from N(mean, std^2).
#[derive(Clone, Debug)]
pub struct Initializer {
    rng: ChaCha8Rng,
    std: f64,
}

impl Initializer {
    pub fn new(seed: u64, std: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], mean: f64) -> Tensor<T> {
        let dist = Normal::new(mean, self.std).expect("finite non-negative std");
        Tensor::from_fn(shape.to_vec(), |_| T::of(dist.sample(&mut self.rng)))
    }
}
