//! Seeded random streams.
//!
//! Every draw in the crate goes through [`RngStream`], a thin wrapper over
//! the ChaCha8 stream cipher generator (`rand_chacha::ChaCha8Rng`, seeded
//! with `seed_from_u64`). ChaCha output is specified bit-for-bit, so the same
//! seed produces the same sequence on every platform. Gaussian draws use
//! `rand_distr`'s ziggurat sampler on top of it.
//!
//! Child streams come in two flavours: [`RngStream::derive`] mixes a text
//! label into the seed (stable regardless of what else was drawn), and
//! [`RngStream::fork`] uses an internal split counter.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    splits: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub splits: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

fn mix(seed: u64, label: &str, counter: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update(counter.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            splits: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by `label`; does not advance `self`.
    pub fn derive(&self, label: &str) -> RngStream {
        RngStream::new(mix(self.seed, label, 0))
    }

    /// Child stream keyed by the split counter, which is incremented.
    pub fn fork(&mut self) -> RngStream {
        self.splits += 1;
        RngStream::new(mix(self.seed, "fork", self.splits))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std * z
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates with our own draws keeps the order independent of
        // the `rand` slice helpers' implementation details.
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn state(&self) -> RngState {
        let pos = self.inner.get_word_pos();
        RngState {
            seed: self.seed,
            splits: self.splits,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut s = RngStream::new(state.seed);
        s.splits = state.splits;
        s.inner
            .set_word_pos(((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128);
        s
    }
}
