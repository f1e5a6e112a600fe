//! Seeded random helpers. ChaCha8 keeps streams identical across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::vector::{normalize_vec, Embedding};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Uniformly distributed point on the unit sphere in `dim` dimensions.
pub fn random_unit<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> Embedding {
    loop {
        if let Ok(v) = normalize_vec(gaussian_vec(rng, dim)) {
            return v;
        }
    }
}
