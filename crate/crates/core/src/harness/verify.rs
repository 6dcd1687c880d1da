use rand::Rng;
use rayon::prelude::*;

use super::config::ExperimentConfig;
use crate::accum::LossGrad;
use crate::cpgo::{cpgo_loss, verify_consistency_scaling, CpgoConfig, Probe, ScalingReport};
use crate::flow::{fm_loss, Arch, GaussianMixture, PretrainBatch, TimeGrid, VelocityModel};
use crate::group::{Granularity, RewardSource, RolloutGroup};
use crate::objectives::{
    ddpo_loss, dpo_loss, grpo_loss, verify_identities, ClipConfig, IdentityTolerances, DdpoAggregation,
    Subsample,
};
use crate::report::Report;
use crate::rewards::RewardSpec;
use crate::rng::{NoiseKey, Stream};
use crate::sde::{rollout, NoiseSchedule};
use crate::vh::{self, GrayImage, NoiseParams};
use crate::Result;

/// max_i |a_i − n_i| / max(‖a‖∞, ‖n‖∞): the worst componentwise deviation
/// relative to the gradient's scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        worst
    } else {
        worst / scale
    }
}

/// Central finite differences of `f` over every parameter, compared with the
/// analytic gradient `f` returns.
pub fn gradient_check<F>(model: &VelocityModel, h: f64, f: F) -> Result<f64>
where
    F: Fn(&VelocityModel) -> Result<LossGrad> + Sync,
{
    let analytic = f(model)?.grad;
    let numeric: Vec<f64> = (0..model.num_params())
        .into_par_iter()
        .map(|i| {
            let mut m = model.clone();
            let p = m.params()[i];
            m.params_mut()[i] = p + h;
            let up = f(&m)?.loss;
            m.params_mut()[i] = p - h;
            let down = f(&m)?.loss;
            Ok((up - down) / (2.0 * h))
        })
        .collect::<Result<_>>()?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// A small model pair with recorded rollouts, shared by the gradient and
/// identity checks.
pub struct GradientFixture {
    /// Policy that generated the rollouts.
    pub old: VelocityModel,
    /// Perturbed current policy.
    pub model: VelocityModel,
    pub group: RolloutGroup,
    pub batch: PretrainBatch,
}

impl GradientFixture {
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        let old = VelocityModel::new(arch, seed);
        let mut model = old.clone();
        let mut rng = NoiseKey::new(Stream::Diagnostics, seed).iter(1).rng();
        for p in model.params_mut() {
            *p += 0.02 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let grid = TimeGrid::shifted(8, 3.0)?;
        let sched = NoiseSchedule::constant(0.3, &grid);
        let data = GaussianMixture::default();
        let init: Vec<Vec<f64>> = (0..4)
            .map(|k| NoiseKey::new(Stream::InitialNoise, seed).traj(k).normal_vec(2))
            .collect();
        let cond = 2;
        let trajs = rollout(&old, &init, &grid, cond, &sched, NoiseKey::new(Stream::StepNoise, seed), 0)?;
        let reward = RewardSpec::target_distance(data.centers.clone());
        let rewards = trajs
            .iter()
            .map(|t| reward.evaluate(t.last(), cond))
            .collect::<Result<Vec<_>>>()?;
        let group = RolloutGroup::new(
            Granularity::Coarse,
            trajs,
            rewards,
            (grid.steps(), 0),
            RewardSource::Endpoint,
            1e-8,
            5.0,
        )?;
        let batch = PretrainBatch::sample(&data, 32, &mut rng);
        Ok(Self {
            old,
            model,
            group,
            batch,
        })
    }
}

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const IDENTITY_TOLERANCE: f64 = 1e-8;

/// Finite-difference checks of every differentiable loss on a small model.
pub fn gradient_checks(fx: &GradientFixture) -> Result<Report> {
    let h = 1e-6;
    let all = Subsample::all();
    let wide = ClipConfig {
        epsilon: 1e6,
        adv_clip: f64::INFINITY,
    };
    let g = &fx.group;
    let trajs: Vec<&_> = g.trajectories.iter().collect();
    let cpgo_cfg = CpgoConfig {
        tau: 0.6,
        ..CpgoConfig::default()
    };
    let (winner, loser) = (&g.trajectories[0], &g.trajectories[1]);
    let mut report = Report::default();
    let checks: Vec<(&str, f64)> = vec![
        ("fm_loss_gradient", gradient_check(&fx.model, h, |m| fm_loss(m, &fx.batch))?),
        (
            "grpo_loss_gradient",
            gradient_check(&fx.model, h, |m| grpo_loss(m, &fx.old, &[g], &wide, &all))?,
        ),
        (
            "ddpo_loss_gradient",
            gradient_check(&fx.model, h, |m| ddpo_loss(m, &fx.old, &[g], &all, DdpoAggregation::Group))?,
        ),
        (
            "dpo_loss_gradient",
            gradient_check(&fx.model, h, |m| dpo_loss(m, &fx.old, winner, loser, 1.0, &all))?,
        ),
        (
            "cpgo_loss_gradient",
            gradient_check(&fx.model, h, |m| Ok(cpgo_loss(m, &fx.old, &trajs, &cpgo_cfg)?.value))?,
        ),
    ];
    for (name, err) in checks {
        report.below(name, err, GRADIENT_TOLERANCE);
    }
    Ok(report)
}

/// Deterministic probe start states, spread over all conditions.
pub fn scaling_probes(cfg: &ExperimentConfig, n: usize) -> Vec<Probe> {
    (0..n)
        .map(|i| Probe {
            x1: NoiseKey::new(Stream::Eval, cfg.seed).iter(1).traj(i as u64).normal_vec(2),
            cond: i % cfg.data.n_modes,
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Straightforward re-evaluation of the image metrics, used as an oracle.
mod direct {
    use super::GrayImage;

    pub fn laplacian_variance(img: &GrayImage) -> f64 {
        let mut vals = Vec::new();
        for y in 1..img.height() - 1 {
            for x in 1..img.width() - 1 {
                vals.push(
                    img.get(x - 1, y) + img.get(x + 1, y) + img.get(x, y - 1) + img.get(x, y + 1) - 4.0 * img.get(x, y),
                );
            }
        }
        let n = vals.len() as f64;
        let sq = vals.iter().map(|v| v * v).sum::<f64>() / n;
        let m = vals.iter().sum::<f64>() / n;
        sq - m * m
    }

    pub fn high_freq_energy(img: &GrayImage) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for y in 1..img.height() - 1 {
            for x in 1..img.width() - 1 {
                let mut box_sum = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        box_sum += img.get(x + dx - 1, y + dy - 1);
                    }
                }
                s += (9.0 * img.get(x, y) - box_sum).abs();
                n += 1.0;
            }
        }
        s / n
    }

    /// Canny with direction bins decided by slope comparisons and hysteresis
    /// by repeated sweeps until nothing changes.
    pub fn canny(img: &GrayImage, low: f64, high: f64) -> Vec<bool> {
        let (w, h) = (img.width(), img.height());
        let mut gx = vec![0.0; w * h];
        let mut gy = vec![0.0; w * h];
        let sx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let sy = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for j in 0..3 {
                    for i in 0..3 {
                        let p = img.get(x + i - 1, y + j - 1);
                        gx[y * w + x] += sx[j][i] * p;
                        gy[y * w + x] += sy[j][i] * p;
                    }
                }
            }
        }
        let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
        let t1 = 22.5f64.to_radians().tan();
        let t2 = 67.5f64.to_radians().tan();
        let mut thin = vec![0.0; w * h];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let i = y * w + x;
                if mag[i] == 0.0 {
                    continue;
                }
                let (a, b) = (gx[i], gy[i]);
                // fold the direction into [0°, 180°)
                let (a, b) = if b < 0.0 || (b == 0.0 && a < 0.0) { (-a, -b) } else { (a, b) };
                let (n1, n2) = if b < t1 * a.abs() {
                    (mag[i - 1], mag[i + 1])
                } else if b >= t2 * a.abs() {
                    (mag[i - w], mag[i + w])
                } else if a > 0.0 {
                    (mag[i - w - 1], mag[i + w + 1])
                } else {
                    (mag[i - w + 1], mag[i + w - 1])
                };
                if mag[i] >= n1 && mag[i] >= n2 {
                    thin[i] = mag[i];
                }
            }
        }
        let mut on: Vec<bool> = thin.iter().map(|&m| m > 0.0 && m >= high).collect();
        loop {
            let mut changed = false;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if on[i] || !(thin[i] > 0.0 && thin[i] >= low) {
                        continue;
                    }
                    let mut near = false;
                    for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                        for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                            near |= on[ny * w + nx];
                        }
                    }
                    if near {
                        on[i] = true;
                        changed = true;
                    }
                }
            }
            if !changed {
                return on;
            }
        }
    }

    pub fn edge_artifact(img: &GrayImage, low: f64, high: f64) -> f64 {
        let (w, h) = (img.width(), img.height());
        let edges = canny(img, low, high);
        // two 3×3 dilations reach every pixel within Chebyshev distance 2
        let mut vals = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let hit = (y.saturating_sub(2)..=(y + 2).min(h - 1))
                    .any(|ny| (x.saturating_sub(2)..=(x + 2).min(w - 1)).any(|nx| edges[ny * w + nx]));
                if hit {
                    vals.push(img.get(x, y));
                }
            }
        }
        if vals.is_empty() {
            return 0.0;
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
    }

    pub fn noise_estimate(img: &GrayImage, k: usize, pct: f64, sigma: f64, radius: usize) -> f64 {
        let (w, h) = (img.width(), img.height());
        let half = k / 2;
        let size = 2 * radius + 1;
        let mut kernel = vec![0.0; size * size];
        for j in 0..size {
            for i in 0..size {
                let (dx, dy) = (i as f64 - radius as f64, j as f64 - radius as f64);
                kernel[j * size + i] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
        let total: f64 = kernel.iter().sum();
        let mut stds = Vec::new();
        let mut resid = Vec::new();
        for y in half..h - half {
            for x in half..w - half {
                let mut win = Vec::with_capacity(k * k);
                for yy in y - half..=y + half {
                    for xx in x - half..=x + half {
                        win.push(img.get(xx, yy));
                    }
                }
                let m = win.iter().sum::<f64>() / win.len() as f64;
                stds.push((win.iter().map(|v| (v - m).powi(2)).sum::<f64>() / win.len() as f64).sqrt());
                let mut blur = 0.0;
                for j in 0..size {
                    for i in 0..size {
                        blur += kernel[j * size + i] * img.get(x + i - radius, y + j - radius);
                    }
                }
                resid.push((img.get(x, y) - blur / total).abs());
            }
        }
        let mut sorted = stds.clone();
        sorted.sort_by(f64::total_cmp);
        let pos = pct / 100.0 * (sorted.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        let thr = sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]);
        let mut sel: Vec<usize> = (0..stds.len()).filter(|&i| stds[i] < thr).collect();
        if sel.is_empty() {
            sel = (0..stds.len()).filter(|&i| stds[i] <= thr).collect();
        }
        sel.iter().map(|&i| resid[i]).sum::<f64>() / sel.len() as f64
    }
}

fn random_image(key: NoiseKey, w: usize, h: usize) -> Result<GrayImage> {
    let mut rng = key.rng();
    GrayImage::new(w, h, (0..w * h).map(|_| rng.random::<f64>() * 255.0).collect())
}

/// Each image metric against its direct re-evaluation on random 16×16
/// images, plus the constant-image, noise-ordering and blur checks.
pub fn vh_oracle_check(n_images: usize, seed: u64) -> Result<Report> {
    let params = NoiseParams::default();
    let mut worst = [0.0f64; 4];
    for i in 0..n_images {
        let img = random_image(NoiseKey::new(Stream::Diagnostics, seed).iter(7).traj(i as u64), 16, 16)?;
        // also exercise structured content so the edge mask is non-trivial
        let img = GrayImage::from_fn(16, 16, |x, y| {
            let base = if x + y > 15 { 200.0 } else { 40.0 };
            0.7 * base + 0.3 * img.get(x, y)
        })?;
        let pairs = [
            (vh::laplacian_variance(&img)?, direct::laplacian_variance(&img)),
            (vh::high_freq_energy(&img)?, direct::high_freq_energy(&img)),
            (vh::edge_artifact(&img, 50.0, 150.0)?, direct::edge_artifact(&img, 50.0, 150.0)),
            (
                vh::noise_estimate(&img, &params)?,
                direct::noise_estimate(&img, params.window, params.percentile, params.sigma, params.radius),
            ),
        ];
        for (w, (a, b)) in worst.iter_mut().zip(pairs) {
            *w = w.max(rel(a, b));
        }
    }
    let mut report = Report::default();
    for (name, w) in ["laplacian_variance", "high_freq_energy", "edge_artifact", "noise_estimate"]
        .iter()
        .zip(worst)
    {
        report.below(format!("vh_{name}_oracle"), w, 1e-10);
    }

    let flat = GrayImage::constant(16, 16, 117.0);
    let zeros = [
        vh::laplacian_variance(&flat)?,
        vh::high_freq_energy(&flat)?,
        vh::edge_artifact(&flat, 50.0, 150.0)?,
        vh::noise_estimate(&flat, &params)?,
    ];
    let worst_zero = zeros.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    report.check("vh_constant_image_zero", worst_zero, 0.0, worst_zero == 0.0);

    let base = GrayImage::from_fn(32, 32, |x, y| 128.0 + 60.0 * ((x as f64) / 6.0).sin() * ((y as f64) / 9.0).cos())?;
    let mut estimates = Vec::new();
    for (j, sigma) in [1.0, 2.0, 4.0].into_iter().enumerate() {
        let mut rng = NoiseKey::new(Stream::Diagnostics, seed).iter(8).traj(j as u64).rng();
        let pixels: Vec<f64> = base
            .pixels()
            .iter()
            .map(|p| p + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let noisy = GrayImage::new(32, 32, pixels)?;
        estimates.push(vh::noise_estimate(&noisy, &params)?);
    }
    let increasing = estimates.windows(2).all(|w| w[1] > w[0]);
    report.check("vh_noise_increases_with_sigma", estimates[2] / estimates[0], 2.0, increasing && estimates[2] > 2.0 * estimates[0]);

    let sharp = random_image(NoiseKey::new(Stream::Diagnostics, seed).iter(9), 24, 24)?;
    let taps = vh::gaussian_taps(1.0, 2);
    let blurred = GrayImage::from_fn(24, 24, |x, y| {
        let mut s = 0.0;
        let mut wsum = 0.0;
        for (j, ty) in taps.iter().enumerate() {
            for (i, tx) in taps.iter().enumerate() {
                let (xx, yy) = (x as isize + i as isize - 2, y as isize + j as isize - 2);
                if xx >= 0 && yy >= 0 && (xx as usize) < 24 && (yy as usize) < 24 {
                    s += tx * ty * sharp.get(xx as usize, yy as usize);
                    wsum += tx * ty;
                }
            }
        }
        s / wsum
    })?;
    let (a, b) = (vh::laplacian_variance(&blurred)?, vh::laplacian_variance(&sharp)?);
    report.check("vh_blur_lowers_laplacian_variance", a / b, 1.0, a < b);
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct VerifyOutput {
    pub report: Report,
    pub scaling: ScalingReport,
}

/// Gradient checks, objective identities, clipped zero-gradient cases, the
/// consistency scaling test on the pretrained model and the image-metric
/// oracles.
pub fn run_verify(cfg: &ExperimentConfig) -> Result<VerifyOutput> {
    cfg.validate()?;
    let pretrained = super::load_pretrained(cfg)?;
    let mut report = Report::default();
    let fx = GradientFixture::new(Arch::tiny(), cfg.seed)?;
    report.extend(gradient_checks(&fx)?);
    report.extend(verify_identities(
        &fx.model,
        &fx.old,
        &fx.group,
        cfg.objectives.beta,
        &IdentityTolerances {
            relative: IDENTITY_TOLERANCE,
        },
    )?);
    let probes = scaling_probes(cfg, cfg.diagnostics.scaling_probes);
    let scaling = verify_consistency_scaling(
        &pretrained,
        &cfg.diagnostics.scaling_steps,
        cfg.grid.shift,
        &probes,
        (3.0, 5.0),
        2,
    )?;
    report.extend(scaling.report.clone());
    report.extend(vh_oracle_check(50, cfg.seed)?);
    Ok(VerifyOutput { report, scaling })
}
