//! Synthetic fixtures shared by the CLI and acceptance tests.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use realpatch::Dataset;

/// Two Gaussian spurious groups: the treated group's mean is shifted by
/// `shift` on the first `shifted_dims` of `d` covariates. Groups are
/// exactly balanced; target labels are independent coin flips.
pub fn gaussian_shift_fixture(seed: u64, n: usize, d: usize, shifted_dims: usize, shift: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, d));
    let mut y = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        let zi = (i % 2) as u8;
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            let mean = if zi == 1 && j < shifted_dims { shift } else { 0.0 };
            x[[i, j]] = mean + noise;
        }
        y.push(rng.random_range(0..2));
        z.push(zi);
    }
    Dataset::new((0..n).map(|i| format!("s{i}")).collect(), x, y, z).unwrap()
}

/// Binary task with a spurious shortcut: the label signal lives on dims
/// 0..8 (strength `label_strength`), the spurious signal on dims 8..16
/// (strength `spurious_strength`), the rest is noise. `rho` is the
/// probability that `z` agrees with `y`.
pub struct SpuriousTask {
    pub label_strength: f64,
    pub spurious_strength: f64,
    pub dims: usize,
}

impl Default for SpuriousTask {
    fn default() -> Self {
        SpuriousTask { label_strength: 0.5, spurious_strength: 1.0, dims: 32 }
    }
}

impl SpuriousTask {
    pub fn generate(&self, seed: u64, n: usize, rho: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, self.dims));
        let mut y = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for i in 0..n {
            let yi: usize = rng.random_range(0..2);
            let zi: u8 = if rng.random_range(0.0..1.0) < rho { yi as u8 } else { 1 - yi as u8 };
            let y_sign = if yi == 1 { 1.0 } else { -1.0 };
            let z_sign = if zi == 1 { 1.0 } else { -1.0 };
            for j in 0..self.dims {
                let noise: f64 = rng.sample(StandardNormal);
                let mean = if j < 8 {
                    y_sign * self.label_strength
                } else if j < 16 {
                    z_sign * self.spurious_strength
                } else {
                    0.0
                };
                x[[i, j]] = mean + noise;
            }
            y.push(yi);
            z.push(zi);
        }
        Dataset::new((0..n).map(|i| format!("s{i}")).collect(), x, y, z).unwrap()
    }
}
