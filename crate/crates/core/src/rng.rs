//! Seeded, splittable randomness.
//!
//! Every stochastic routine takes a `SeedStream` so that a run is a pure
//! function of its seed. Streams are split per module/label so that adding
//! randomness to one stage never perturbs another stage's draws.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct SeedStream {
    rng: ChaCha8Rng,
}

impl SeedStream {
    pub fn from_seed(seed: u64) -> Self {
        SeedStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent child stream for `label`. Deterministic:
    /// the same (seed, label) always yields the same child.
    pub fn derive(seed: u64, label: &str) -> Self {
        // FNV-1a over the label, folded into the seed.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in label.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        SeedStream::from_seed(seed ^ h)
    }

    /// Split off a child stream, advancing this one.
    pub fn split(&mut self) -> Self {
        SeedStream::from_seed(self.rng.next_u64())
    }

    /// Independent child stream for element `index` of a collection,
    /// without advancing this stream.
    pub fn derive_index(seed: u64, label: &str, index: u64) -> Self {
        let mut base = SeedStream::derive(seed, label);
        let k = base.next_u64();
        SeedStream::from_seed(k ^ index.wrapping_mul(0x9e3779b97f4a7c15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.rng.gen_range(lo..hi)
    }

    /// Uniform in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f32 {
        self.rng.sample(StandardNormal)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            xs.swap(i, j);
        }
    }
}
