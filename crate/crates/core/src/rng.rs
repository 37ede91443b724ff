//! Seeded randomness. Every random draw in the crate descends from one 64-bit
//! seed; independent consumers take distinct ChaCha streams of it, so adding
//! draws in one place never shifts another.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, id: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(id);
        Rng { inner }
    }

    /// A child seed space, e.g. one per campaign cell.
    pub fn split(&self, id: u64) -> SeedStream {
        let mut r = self.stream(id ^ 0x5eed_5eed_0000_0000);
        SeedStream {
            seed: r.inner.random(),
        }
    }
}

pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}
