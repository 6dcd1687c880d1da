use serde::{Deserialize, Serialize};

use super::image::GrayImage;
use crate::{Error, Result};

fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Applies a 3×3 kernel at every interior pixel (row-major order).
fn interior_3x3(img: &GrayImage, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut s = 0.0;
            for (dy, row) in k.iter().enumerate() {
                for (dx, kv) in row.iter().enumerate() {
                    if *kv != 0.0 {
                        s += kv * img.get(x + dx - 1, y + dy - 1);
                    }
                }
            }
            out.push(s);
        }
    }
    out
}

const LAPLACIAN: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
const HIGH_PASS: [[f64; 3]; 3] = [[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]];

/// Population variance of the 4-neighbour Laplacian over the interior.
pub fn laplacian_variance(img: &GrayImage) -> Result<f64> {
    img.require_min(3)?;
    Ok(population_variance(&interior_3x3(img, &LAPLACIAN)))
}

/// Mean absolute response of the 8-neighbour high-pass kernel over the interior.
pub fn high_freq_energy(img: &GrayImage) -> Result<f64> {
    img.require_min(3)?;
    let r = interior_3x3(img, &HIGH_PASS);
    Ok(r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64)
}

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Canny edges: Sobel gradients on the interior, L2 magnitude, non-maximum
/// suppression along four quantized directions (a pixel survives when it is
/// not smaller than either neighbour), then hysteresis by 8-connected flood
/// fill from pixels at or above `high` through pixels at or above `low`.
pub fn canny(img: &GrayImage, low: f64, high: f64) -> Result<Mask> {
    if !(low >= 0.0 && low <= high) {
        return Err(Error::InvalidArgument(format!("canny thresholds out of order: {low} > {high}")));
    }
    img.require_min(3)?;
    let (w, h) = (img.width(), img.height());
    let mut mag = vec![0.0; w * h];
    let mut dir = vec![0u8; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = |dx: usize, dy: usize| img.get(x + dx - 1, y + dy - 1);
            let gx = (p(2, 0) + 2.0 * p(2, 1) + p(2, 2)) - (p(0, 0) + 2.0 * p(0, 1) + p(0, 2));
            let gy = (p(0, 2) + 2.0 * p(1, 2) + p(2, 2)) - (p(0, 0) + 2.0 * p(1, 0) + p(2, 0));
            let i = y * w + x;
            mag[i] = (gx * gx + gy * gy).sqrt();
            let mut a = gy.atan2(gx).to_degrees();
            if a < 0.0 {
                a += 180.0;
            }
            dir[i] = if !(22.5..157.5).contains(&a) {
                0
            } else if a < 67.5 {
                1
            } else if a < 112.5 {
                2
            } else {
                3
            };
        }
    }
    let mut thin = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            if mag[i] == 0.0 {
                continue;
            }
            let (a, b) = match dir[i] {
                0 => (i - 1, i + 1),
                1 => (i - w - 1, i + w + 1),
                2 => (i - w, i + w),
                _ => (i - w + 1, i + w - 1),
            };
            if mag[i] >= mag[a] && mag[i] >= mag[b] {
                thin[i] = mag[i];
            }
        }
    }
    let mut bits = vec![false; w * h];
    let mut stack: Vec<usize> = (0..w * h).filter(|&i| thin[i] >= high && thin[i] > 0.0).collect();
    for &i in &stack {
        bits[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (x, y) = (i % w, i / w);
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                let j = ny * w + nx;
                if !bits[j] && thin[j] >= low && thin[j] > 0.0 {
                    bits[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    Ok(Mask {
        width: w,
        height: h,
        bits,
    })
}

/// Binary dilation by a 3×3 square, applied `iterations` times; the window is
/// clipped at the image border.
pub fn dilate(mask: &Mask, iterations: usize) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut cur = mask.bits.clone();
    for _ in 0..iterations {
        let mut next = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                if !cur[y * w + x] {
                    continue;
                }
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        next[ny * w + nx] = true;
                    }
                }
            }
        }
        cur = next;
    }
    Mask {
        width: w,
        height: h,
        bits: cur,
    }
}

pub const DILATION_ITERATIONS: usize = 2;

/// Population std of the original intensities inside the twice-dilated
/// Canny edge mask; 0 when no edges are found.
pub fn edge_artifact(img: &GrayImage, low: f64, high: f64) -> Result<f64> {
    img.require_min(7)?;
    let edges = canny(img, low, high)?;
    let region = dilate(&edges, DILATION_ITERATIONS);
    let vals: Vec<f64> = img
        .pixels()
        .iter()
        .zip(&region.bits)
        .filter(|(_, &b)| b)
        .map(|(&p, _)| p)
        .collect();
    if vals.is_empty() {
        return Ok(0.0);
    }
    Ok(population_variance(&vals).sqrt())
}

/// Normalized 1-D Gaussian taps of length `2·radius + 1`.
pub fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// |I − G_σ(I)| at (x, y), written as a weighted sum of differences so that
/// flat neighbourhoods give exactly zero. The kernel must fit inside the image.
fn blur_residual(img: &GrayImage, taps: &[f64], x: usize, y: usize) -> f64 {
    let r = taps.len() / 2;
    let c = img.get(x, y);
    let mut s = 0.0;
    for (j, ty) in taps.iter().enumerate() {
        for (i, tx) in taps.iter().enumerate() {
            s += ty * tx * (c - img.get(x + i - r, y + j - r));
        }
    }
    s.abs()
}

/// Local population std in `k×k` windows via summed-area tables, for every
/// window centre at least `k/2` pixels from the border (row-major).
fn local_std(img: &GrayImage, k: usize) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let stride = w + 1;
    let mut s1 = vec![0.0; stride * (h + 1)];
    let mut s2 = vec![0.0; stride * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            let p = img.get(x, y);
            let i = (y + 1) * stride + x + 1;
            s1[i] = p + s1[i - 1] + s1[i - stride] - s1[i - stride - 1];
            s2[i] = p * p + s2[i - 1] + s2[i - stride] - s2[i - stride - 1];
        }
    }
    let rect = |s: &[f64], x0: usize, y0: usize| {
        let (x1, y1) = (x0 + k, y0 + k);
        s[y1 * stride + x1] - s[y0 * stride + x1] - s[y1 * stride + x0] + s[y0 * stride + x0]
    };
    let n = (k * k) as f64;
    let mut out = Vec::with_capacity((w - k + 1) * (h - k + 1));
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let m = rect(&s1, x0, y0) / n;
            let var = (rect(&s2, x0, y0) / n - m * m).max(0.0);
            out.push(var.sqrt());
        }
    }
    out
}

/// Linear interpolation between closest ranks.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub window: usize,
    pub percentile: f64,
    pub sigma: f64,
    /// Gaussian kernel radius (2 gives a 5×5 kernel).
    pub radius: usize,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            window: 7,
            percentile: 30.0,
            sigma: 1.0,
            radius: 2,
        }
    }
}

/// Mean of |I − G_σ(I)| over the smooth pixels, i.e. window centres whose
/// local std falls below the given percentile. When no centre is strictly
/// below (flat images), centres equal to the percentile are used.
pub fn noise_estimate(img: &GrayImage, params: &NoiseParams) -> Result<f64> {
    let k = params.window;
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("noise window must be odd, got {k}")));
    }
    let half = k / 2;
    if half < params.radius {
        return Err(Error::InvalidArgument(format!(
            "noise window {k} is narrower than the {}x{} blur kernel",
            2 * params.radius + 1,
            2 * params.radius + 1
        )));
    }
    img.require_min(k)?;
    let w = img.width();
    let stds = local_std(img, k);
    let threshold = percentile(&stds, params.percentile);
    let taps = gaussian_taps(params.sigma, params.radius);
    let cols = w - k + 1;
    let residual = |j: usize| blur_residual(img, &taps, j % cols + half, j / cols + half);
    let mut picked: Vec<usize> = (0..stds.len()).filter(|&j| stds[j] < threshold).collect();
    if picked.is_empty() {
        picked = (0..stds.len()).filter(|&j| stds[j] <= threshold).collect();
    }
    if picked.is_empty() {
        return Err(Error::NoSmoothRegion);
    }
    Ok(picked.iter().map(|&j| residual(j)).sum::<f64>() / picked.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_images_give_zero() {
        let img = GrayImage::constant(16, 16, 93.0);
        assert_eq!(laplacian_variance(&img).unwrap(), 0.0);
        assert_eq!(high_freq_energy(&img).unwrap(), 0.0);
        assert_eq!(edge_artifact(&img, 50.0, 150.0).unwrap(), 0.0);
        assert_eq!(noise_estimate(&img, &NoiseParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn checkerboard_laplacian() {
        let img = GrayImage::from_fn(8, 8, |x, y| if (x + y) % 2 == 0 { 0.0 } else { 255.0 }).unwrap();
        // 6×6 interior: 18 responses of +1020 and 18 of −1020
        assert_eq!(laplacian_variance(&img).unwrap(), 1020.0 * 1020.0);
    }

    #[test]
    fn impulse_high_pass() {
        let img = GrayImage::from_fn(9, 9, |x, y| if x == 4 && y == 4 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(high_freq_energy(&img).unwrap(), 16.0 / 49.0);
    }

    #[test]
    fn step_edge_band_is_balanced() {
        let img = GrayImage::from_fn(12, 10, |x, _| if x < 6 { 0.0 } else { 255.0 }).unwrap();
        let e = canny(&img, 50.0, 150.0).unwrap();
        for y in 1..9 {
            for x in 0..12 {
                assert_eq!(e.bits[y * 12 + x], x == 5 || x == 6, "({x},{y})");
            }
        }
        assert_eq!(edge_artifact(&img, 50.0, 150.0).unwrap(), 127.5);
        assert!(edge_artifact(&img, 150.0, 50.0).is_err());
    }

    #[test]
    fn ringing_raises_edge_artifact() {
        let clean = GrayImage::from_fn(16, 12, |x, _| if x < 8 { 60.0 } else { 200.0 }).unwrap();
        let ringing = GrayImage::from_fn(16, 12, |x, _| match x {
            6 => 20.0,
            9 => 240.0,
            _ if x < 8 => 60.0,
            _ => 200.0,
        })
        .unwrap();
        assert!(edge_artifact(&ringing, 50.0, 150.0).unwrap() > edge_artifact(&clean, 50.0, 150.0).unwrap());
    }

    #[test]
    fn dilation_grows_square() {
        let mut bits = vec![false; 49];
        bits[24] = true;
        let m = dilate(&Mask { width: 7, height: 7, bits }, 2);
        assert_eq!(m.count(), 25);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0, 4.0], 50.0), 2.5);
        assert_eq!(percentile(&[5.0], 30.0), 5.0);
        assert!((percentile(&[0.0, 10.0], 30.0) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn taps_are_normalized() {
        let t = gaussian_taps(1.0, 2);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[4]);
    }
}
