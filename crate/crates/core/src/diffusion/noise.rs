use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pyramid noise parameters: Gaussian layers drawn at `shape / scale` for each
/// scale, nearest-upsampled, weighted by `discount^k` and renormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub scales: Vec<usize>,
    pub discount: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { scales: vec![1, 2, 4, 8], discount: 0.5, seed: 0 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scales.first() != Some(&1) || self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "noise scales must start at 1 and strictly increase, got {:?}",
                self.scales
            )));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config(format!("noise discount {} outside (0, 1]", self.discount)));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Standard deviation of the un-normalized sum, `sqrt(Σ discount^(2k))`.
    fn norm(&self) -> f64 {
        (0..self.scales.len())
            .map(|k| self.discount.powi(2 * k as i32))
            .sum::<f64>()
            .sqrt()
    }
}

/// Pyramid noise of shape H×W×C drawn from `rng`.
pub fn multires_noise_with<T: Scalar, R: Rng + ?Sized>(
    shape: (usize, usize, usize),
    spec: &NoiseSpec,
    rng: &mut R,
) -> Array3<T> {
    let (h, w, c) = shape;
    let mut acc = Array3::<f64>::zeros(shape);
    for (k, &s) in spec.scales.iter().enumerate() {
        let (lh, lw) = (h.div_ceil(s), w.div_ceil(s));
        let layer: Vec<f64> = (0..lh * lw * c).map(|_| rng.sample(StandardNormal)).collect();
        let weight = spec.discount.powi(k as i32);
        for ((i, j, ch), v) in acc.indexed_iter_mut() {
            *v += weight * layer[((i / s) * lw + j / s) * c + ch];
        }
    }
    let norm = spec.norm();
    acc.mapv(|v| T::lit(v / norm))
}

/// Pyramid noise seeded from `spec.seed`; identical seeds give identical tensors.
pub fn multires_noise<T: Scalar>(shape: (usize, usize, usize), spec: &NoiseSpec) -> Array3<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    multires_noise_with(shape, spec, &mut rng)
}
