use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Isotropic Gaussian mixture; component `c` is the data distribution for
/// condition `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub centers: Vec<Vec<f64>>,
    pub std: f64,
}

impl GaussianMixture {
    /// `n` modes evenly spaced on a circle of the given radius.
    pub fn ring(n: usize, radius: f64, std: f64) -> Self {
        let centers = (0..n)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / n as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self { centers, std }
    }

    pub fn n_modes(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn sample(&self, cond: usize, rng: &mut impl Rng) -> Vec<f64> {
        self.centers[cond]
            .iter()
            .map(|m| m + self.std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Draws `(cond, x)` with the condition uniform over modes.
    pub fn sample_pair(&self, rng: &mut impl Rng) -> (usize, Vec<f64>) {
        let c = rng.random_range(0..self.n_modes());
        (c, self.sample(c, rng))
    }
}

impl Default for GaussianMixture {
    fn default() -> Self {
        Self::ring(8, 4.0, 0.3)
    }
}
