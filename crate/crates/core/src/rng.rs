//! Derived random streams.
//!
//! Every random draw in the toolkit comes from a ChaCha stream whose seed is
//! a SHA-256 digest of the top-level seed plus the logical coordinates of the
//! draw (question, prefix, candidate index, ...). Results therefore depend
//! only on what is being sampled, never on scheduling order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Builder for a stream seed. Each field is length-prefixed so distinct
/// field sequences never collide by concatenation.
#[derive(Clone)]
pub struct StreamKey {
    hasher: Sha256,
}

impl StreamKey {
    pub fn new(seed: u64, domain: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        let key = Self { hasher };
        key.str(domain)
    }

    pub fn bytes(mut self, bytes: &[u8]) -> Self {
        self.hasher.update((bytes.len() as u64).to_le_bytes());
        self.hasher.update(bytes);
        self
    }

    pub fn str(self, s: &str) -> Self {
        self.bytes(s.as_bytes())
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.hasher.update([8u8]);
        self.hasher.update(v.to_le_bytes());
        self
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.hasher.finalize().into())
    }
}

/// Gaussian around `mean` conditioned on landing in `[0, 1]` (rejection
/// sampling). `sigma == 0` returns `mean` unchanged.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sigma: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&mean));
    if sigma == 0.0 {
        return mean;
    }
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let x = mean + sigma * z;
        if (0.0..=1.0).contains(&x) {
            return x;
        }
    }
}
