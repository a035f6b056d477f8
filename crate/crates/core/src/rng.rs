//! Counter-based random streams.
//!
//! A [`SeedTree`] is a root seed plus a path of `(label, index)` pairs. The
//! stream for a path is a pure function of the root and the path, so
//! replicates can run in any order or in parallel and still draw the same
//! numbers.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
    path: Vec<(String, u64)>,
    key: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root, path: Vec::new(), key: splitmix64(root) }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn path(&self) -> &[(String, u64)] {
        &self.path
    }

    pub fn child(&self, label: &str, index: u64) -> SeedTree {
        let mut path = self.path.clone();
        path.push((label.to_string(), index));
        let k = splitmix64(self.key ^ fnv1a(label));
        let key = splitmix64(k ^ splitmix64(index.wrapping_mul(GOLDEN)));
        SeedTree { root: self.root, path, key }
    }

    /// Stream for `self / (label, index)`.
    pub fn derive(&self, label: &str, index: u64) -> Stream {
        self.child(label, index).stream()
    }

    /// Stream for this node itself.
    pub fn stream(&self) -> Stream {
        let mut seed = [0u8; 32];
        let mut state = self.key;
        for chunk in seed.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Stream { rng: ChaCha12Rng::from_seed(seed) }
    }
}

/// A reproducible random stream owned by one task.
#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha12Rng,
}

impl Stream {
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard_normal()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Draws a category from (not necessarily normalized) nonnegative weights.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let total: f64 = probs.iter().sum();
        let u = self.uniform() * total;
        let mut acc = 0.0;
        for (k, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        // u landed in the rounding gap at the top; take the last positive entry
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// Independent normals with the given means and variances.
    pub fn normal_diag(&mut self, mean: &[f64], var: &[f64]) -> Vec<f64> {
        mean.iter().zip(var).map(|(&mu, &v)| mu + v.sqrt() * self.standard_normal()).collect()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}
