//! Low-level hallucination metrics for grayscale images, latent-trajectory
//! straightness, and a rasterizer that turns 2-D sample sets into images.

mod image;
pub mod metrics;

pub use image::GrayImage;
pub use metrics::{
    canny, dilate, edge_artifact, gaussian_taps, high_freq_energy, laplacian_variance, noise_estimate,
    percentile, Mask, NoiseParams, DILATION_ITERATIONS,
};

use serde::{Deserialize, Serialize};

use crate::trajectory::Trajectory;
use crate::{Error, Result};

/// Mean squared deviation of the interior states from the straight line
/// joining the start state and the clean endpoint, divided by the dimension.
/// The line is parameterized by knot time relative to the start time, which
/// reduces to (1−t)·x0 + t·x1 for trajectories started at t = 1.
pub fn latent_consistency(traj: &Trajectory) -> Result<f64> {
    let x0 = traj.endpoint()?;
    let x1 = traj.initial();
    let t_start = traj.knots[traj.start_knot];
    let interior = traj.states.len().saturating_sub(2);
    if interior == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (i, x) in traj.states[1..traj.states.len() - 1].iter().enumerate() {
        let t = traj.knots[traj.start_knot - 1 - i] / t_start;
        sum += x
            .iter()
            .zip(x0.iter().zip(x1))
            .map(|(xi, (a, b))| {
                let d = xi - ((1.0 - t) * a + t * b);
                d * d
            })
            .sum::<f64>();
    }
    Ok(sum / (traj.dim() as f64 * interior as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn square(half: f64) -> Self {
        Self {
            x_min: -half,
            x_max: half,
            y_min: -half,
            y_max: half,
        }
    }

    /// Pixel centre of column `i` / row `j`; corner pixels sit on the bounds
    /// and row 0 is the top (`y_max`).
    pub fn pixel_center(&self, i: usize, j: usize, resolution: usize) -> (f64, f64) {
        let s = (resolution - 1) as f64;
        (
            self.x_min + i as f64 / s * (self.x_max - self.x_min),
            self.y_max - j as f64 / s * (self.y_max - self.y_min),
        )
    }
}

/// Gaussian kernel-density splat of the samples, scaled so the densest
/// pixel is 255.
pub fn rasterize_samples(samples: &[Vec<f64>], bounds: &Bounds, resolution: usize, bandwidth: f64) -> Result<GrayImage> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if resolution < 16 {
        return Err(Error::InvalidArgument(format!("resolution must be at least 16, got {resolution}")));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if let Some(s) = samples.iter().find(|s| s.len() != 2) {
        return Err(Error::Dimension { expected: 2, got: s.len() });
    }
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut density = Vec::with_capacity(resolution * resolution);
    for j in 0..resolution {
        for i in 0..resolution {
            let (px, py) = bounds.pixel_center(i, j, resolution);
            let d: f64 = samples
                .iter()
                .map(|s| {
                    let (dx, dy) = (s[0] - px, s[1] - py);
                    (-(dx * dx + dy * dy) * inv).exp()
                })
                .sum();
            density.push(d);
        }
    }
    let max = density.iter().cloned().fold(0.0, f64::max);
    let pixels = if max > 0.0 {
        density.iter().map(|d| 255.0 * d / max).collect()
    } else {
        density
    };
    GrayImage::new(resolution, resolution, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VhParams {
    pub canny_low: f64,
    pub canny_high: f64,
    pub noise: NoiseParams,
}

impl Default for VhParams {
    fn default() -> Self {
        Self {
            canny_low: 50.0,
            canny_high: 150.0,
            noise: NoiseParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VhReport {
    pub laplacian_variance: f64,
    pub high_freq_energy: f64,
    pub edge_artifact: f64,
    pub noise_level: f64,
    pub params: VhParams,
    /// Reserved for scores merged in from an external evaluator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail_sharpness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub irrelevant_details: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_pattern: Option<f64>,
}

pub fn evaluate_image(img: &GrayImage, params: &VhParams) -> Result<VhReport> {
    Ok(VhReport {
        laplacian_variance: laplacian_variance(img)?,
        high_freq_energy: high_freq_energy(img)?,
        edge_artifact: edge_artifact(img, params.canny_low, params.canny_high)?,
        noise_level: noise_estimate(img, &params.noise)?,
        params: *params,
        detail_sharpness: None,
        irrelevant_details: None,
        grid_pattern: None,
    })
}
