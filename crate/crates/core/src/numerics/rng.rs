//! Seeded, counter-based random streams.
//!
//! Every stochastic draw in the crate goes through an [`RngStream`]. The
//! generator is ChaCha20 (a counter-mode stream cipher), so a given
//! `(seed, stream)` pair replays bit-identically on every platform.
//! Independent sub-streams are derived by hashing a label and an index into
//! the ChaCha stream id, which lets parallel workers each own a stream
//! without coordinating.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub const ALGORITHM: &str = "chacha20";

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    draws: u64,
    inner: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngStream { seed, stream, draws: 0, inner }
    }

    /// A sub-stream keyed by `(label, index)`, independent of how many
    /// values have been drawn from `self`.
    pub fn derive(&self, label: &str, index: u64) -> RngStream {
        // FNV-1a over the parent stream id, the label and the index.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(&self.stream.to_le_bytes());
        eat(label.as_bytes());
        eat(&index.to_le_bytes());
        RngStream::with_stream(self.seed, h)
    }

    pub fn algorithm(&self) -> &'static str {
        ALGORITHM
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of primitive draws taken so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.draws += 1;
        self.inner.gen_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.draws += 1;
        self.inner.gen_range(lo..=hi)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.draws += 1;
        StandardNormal.sample(&mut self.inner)
    }

    /// Gamma(shape, 1). Panics on a non-positive shape.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        self.draws += 1;
        Gamma::new(shape, 1.0).expect("gamma shape must be positive").sample(&mut self.inner)
    }

    /// Index drawn from a categorical distribution given by `probs`.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform() * probs.iter().sum::<f64>();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding gap at the top; return the last non-zero class.
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }
}
