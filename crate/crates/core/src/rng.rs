//! Labelled, seedable random streams.
//!
//! A stream is keyed by a 64-bit master seed and a string label. The key
//! material is hashed into a ChaCha8 seed, so streams with distinct labels
//! are independent while identical keys always replay the same draws.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    draws: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self {
            seed,
            label,
            draws: 0,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// A stream whose label extends this stream's label with `part`.
    pub fn child(&self, part: impl std::fmt::Display) -> Self {
        Self::new(self.seed, format!("{}/{}", self.label, part))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of draws consumed so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        self.inner.gen::<f64>()
    }

    /// Uniform draw in (lo, hi].
    pub fn uniform_left_open(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.uniform();
        hi - (hi - lo) * u
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.draws += 1;
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    /// Standard normal draw (Box-Muller, one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_keys_replay() {
        let mut a = RngStream::new(7, "rollout/0/1");
        let mut b = RngStream::new(7, "rollout/0/1");
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
        assert_eq!(a.draws(), 100);
    }

    #[test]
    fn distinct_labels_diverge() {
        let mut a = RngStream::new(7, "a");
        let mut b = RngStream::new(7, "b");
        let xs: Vec<f64> = (0..8).map(|_| a.uniform()).collect();
        let ys: Vec<f64> = (0..8).map(|_| b.uniform()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn distinct_labels_uncorrelated() {
        let n = 20_000;
        let mut a = RngStream::new(1, "x");
        let mut b = RngStream::new(1, "y");
        let (mut sab, mut sa, mut sb, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = a.uniform();
            let y = b.uniform();
            sab += x * y;
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
        }
        let n = n as f64;
        let cov = sab / n - sa / n * sb / n;
        let corr = cov / ((saa / n - (sa / n).powi(2)) * (sbb / n - (sb / n).powi(2))).sqrt();
        assert!(corr.abs() < 4.0 / n.sqrt(), "corr {corr}");
    }

    #[test]
    fn left_open_interval() {
        let mut r = RngStream::new(3, "t");
        for _ in 0..1000 {
            let t = r.uniform_left_open(1e-4, 1.0);
            assert!(t > 1e-4 && t <= 1.0);
        }
    }
}
