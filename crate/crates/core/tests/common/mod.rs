#![allow(dead_code)]

pub mod checks;
pub mod grids;
pub mod oracle;
pub mod synth;

use gridmtl::mtl::Batch;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub fn random_batch(n: usize, d: usize, cd: usize, seed: u64) -> Batch {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Batch {
        x: Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal)),
        c: Array2::from_shape_fn((n, cd), |_| (rng.random::<f64>() < 0.3) as u8 as f64),
        y: Array2::from_shape_fn((n, 4), |_| (rng.random::<f64>() < 0.5) as u8 as f64),
    }
}
