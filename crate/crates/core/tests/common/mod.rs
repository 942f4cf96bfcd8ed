//! Shared checks for the integration suites and the acceptance report.

#![allow(dead_code)]

pub mod gradients;
pub mod oracles;

use fcnreg::{Dims, FeatureMap, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn uniform_map(batch: usize, channels: usize, dims: Dims, rng: &mut ChaCha8Rng) -> FeatureMap<f64> {
    let data = uniform_vec(batch * channels * dims.voxels(), -1.0, 1.0, rng);
    FeatureMap::new(batch, channels, dims, data).unwrap()
}

pub fn uniform_volume(dims: Dims, rng: &mut ChaCha8Rng) -> Volume<f64> {
    Volume::new(dims, uniform_vec(dims.voxels(), 0.0, 1.0, rng)).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Outcome of one named check, with the worst observed deviation.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }

    pub fn assert(&self) {
        assert!(
            self.passed(),
            "{}: worst {:.3e} exceeds {:.1e}",
            self.name,
            self.worst,
            self.tolerance
        );
    }
}
