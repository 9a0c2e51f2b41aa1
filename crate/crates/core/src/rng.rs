//! Seeded random number generation for reproducible initialization.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Seed used when nothing else is specified.
pub const DEFAULT_SEED: u64 = 42;

/// Deterministic generator. The same seed yields the same draw sequence on
/// every platform and thread count.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw from the closed interval `[lo, hi]`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.inner.gen_range(lo..=hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<T>> {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64_lossy(self.uniform(lo, hi)))
            .collect();
        Tensor::new(shape, data)
    }

    /// Uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

/// Glorot/Xavier uniform initialization of a `fan_in x fan_out` matrix.
pub fn xavier_init<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Result<Tensor<T>> {
    let &[fan_in, fan_out] = shape else {
        return Err(Error::shape(shape, "xavier init needs a rank-2 shape"));
    };
    let bound = xavier_bound(fan_in, fan_out);
    rng.uniform_tensor(shape, -bound, bound)
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
