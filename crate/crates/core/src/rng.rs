//! Seeded random stream shared by dropout, batch sampling, initialization and
//! generation.
//!
//! The generator is ChaCha8 (`rand_chacha`), a counter-based stream cipher
//! whose output is fixed across platforms and crate releases. Identical seeds
//! driven through an identical call sequence yield identical draws.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};

use crate::scalar::Scalar;

pub const RNG_ALGORITHM: &str = "chacha8";

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this seed, e.g. one per subject.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn log_normal(&mut self, mu: f64, sigma: f64) -> f64 {
        LogNormal::new(mu, sigma).expect("finite log-normal parameters").sample(&mut self.inner)
    }

    /// Bernoulli keep-mask: each entry is `false` with probability `rate`.
    pub fn fill_keep(&mut self, keep: &mut [bool], rate: f64) {
        let threshold = (rate * 4_294_967_296.0) as u64;
        let mut buf = [0u32; 256];
        for chunk in keep.chunks_mut(buf.len()) {
            let draws = &mut buf[..chunk.len()];
            self.inner.fill(draws);
            for (k, &u) in chunk.iter_mut().zip(draws.iter()) {
                *k = u64::from(u) >= threshold;
            }
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Draws an index from unnormalized non-negative weights.
    pub fn categorical<T: Scalar>(&mut self, weights: &[T]) -> usize {
        let total: f64 = weights.iter().map(|w| w.as_f64()).sum();
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            u -= w.as_f64();
            if u < 0.0 {
                return i;
            }
        }
        // rounding left u marginally non-negative; return the last non-zero weight
        weights.iter().rposition(|w| *w > T::zero()).unwrap_or(weights.len() - 1)
    }
}
