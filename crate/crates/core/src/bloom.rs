//! Per-node Bloom filters over label ids.
//!
//! Positions use double hashing `h1 + i * h2 (mod m)` over two independent
//! SplitMix64 hashes of the label. Every filter in one index shares `m` and
//! `k`, so the union of two filters is a bitwise OR.

use serde::{Deserialize, Serialize};

use crate::rng::splitmix64;
use crate::Label;

const SEED_A: u64 = 0x5851_F42D_4C95_7F2D;
const SEED_B: u64 = 0x1405_7B7E_F767_814F;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BloomParams {
    /// Filter size in bits (`m`).
    pub bits: usize,
    /// Probes per element (`k`).
    pub hashes: usize,
}

impl BloomParams {
    /// Standard sizing for `expected` elements at false-positive rate `fp`:
    /// `m = -n ln p / (ln 2)^2`, `k = (m / n) ln 2`.
    pub fn for_capacity(expected: usize, fp: f64) -> Self {
        let n = expected.max(1) as f64;
        let ln2 = std::f64::consts::LN_2;
        let bits = (-n * fp.ln() / (ln2 * ln2)).ceil().max(64.0) as usize;
        let hashes = ((bits as f64 / n) * ln2).round().clamp(1.0, 16.0) as usize;
        Self { bits, hashes }
    }

    fn words(&self) -> usize {
        self.bits.div_ceil(64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BloomFilter {
    words: Vec<u64>,
}

impl BloomFilter {
    pub fn new(params: BloomParams) -> Self {
        Self {
            words: vec![0; params.words()],
        }
    }

    pub fn from_words(words: Vec<u64>) -> Self {
        Self { words }
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    fn positions(label: Label, params: BloomParams) -> impl Iterator<Item = usize> {
        let x = u64::from(label);
        let h1 = splitmix64(x ^ SEED_A);
        let h2 = splitmix64(x ^ SEED_B) | 1;
        let m = params.bits as u64;
        (0..params.hashes as u64).map(move |i| (h1.wrapping_add(i.wrapping_mul(h2)) % m) as usize)
    }

    pub fn insert(&mut self, label: Label, params: BloomParams) {
        for p in Self::positions(label, params) {
            self.words[p / 64] |= 1 << (p % 64);
        }
    }

    pub fn contains(&self, label: Label, params: BloomParams) -> bool {
        Self::positions(label, params).all(|p| self.words[p / 64] & (1 << (p % 64)) != 0)
    }

    pub fn union_with(&mut self, other: &BloomFilter) {
        for (w, o) in self.words.iter_mut().zip(&other.words) {
            *w |= o;
        }
    }

    pub fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }
}
