//! Seedable random source for weights, workloads and noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::numkit::tensor::{Scalar, Tensor};

/// Deterministic RNG; every consumer in the crate derives from a `u64` seed.
pub struct SeedRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent substream for a labelled purpose (weights vs workload vs noise).
    pub fn derive(&self, label: u64) -> Self {
        // splitmix64 of (seed, label) keeps substreams decorrelated
        let mut z = self.seed ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        Self::new(z ^ (z >> 31))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn uniform_u32(&mut self, lo: u32, hi: u32) -> u32 {
        self.inner.random_range(lo..=hi)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std)
            .expect("finite std")
            .sample(&mut self.inner)
    }

    /// Exponential inter-arrival draw for a Poisson process of the given rate.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        Exp::new(rate).expect("positive rate").sample(&mut self.inner)
    }

    pub fn tensor_uniform<T: Scalar>(
        &mut self,
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
    ) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(self.uniform(lo, hi)))
    }

    pub fn tensor_normal<T: Scalar>(
        &mut self,
        shape: impl Into<Vec<usize>>,
        mean: f64,
        std: f64,
    ) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(self.normal(mean, std)))
    }
}
