//! Deterministic, splittable random streams.
//!
//! Every consumer asks for a named stream derived from the run seed, so
//! adding a new consumer never perturbs the draws seen by existing ones.
//! ChaCha is counter based, which keeps the sequences platform independent.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

/// FNV-1a, used only to turn stream labels into stream ids.
fn label_id(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `label` under `seed`.
    pub fn stream(seed: u64, label: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(label_id(label));
        Self { inner }
    }

    /// Child stream keyed by an index, e.g. one per utterance or per layer.
    pub fn split(&self, index: u64) -> Self {
        let mut inner = self.inner.clone();
        inner.set_stream(self.inner.get_stream() ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17));
        inner.set_word_pos(0);
        Self { inner }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_range(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo as u64..=hi as u64) as usize
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.inner);
    }
}
