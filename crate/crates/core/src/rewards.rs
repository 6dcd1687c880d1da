//! Analytic toy rewards and group-level statistics.

use serde::{Deserialize, Serialize};

use crate::flow::GaussianMixture;
use crate::{Error, Result};

/// Anything that scores a clean sample under a condition.
pub trait RewardModel: Sync {
    fn score(&self, x: &[f64], cond: usize) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RewardKind {
    /// −‖x − m_c‖.
    TargetDistance,
    /// q·⌊−‖x − m_c‖ / q⌋; piecewise constant.
    Quantized { step: f64 },
    Composite { parts: Vec<WeightedReward> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedReward {
    pub weight: f64,
    pub kind: RewardKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kind: RewardKind,
    /// Target point per condition.
    pub targets: Vec<Vec<f64>>,
}

impl RewardSpec {
    pub fn target_distance(targets: Vec<Vec<f64>>) -> Self {
        Self {
            kind: RewardKind::TargetDistance,
            targets,
        }
    }

    /// Targets at the mixture's mode centers.
    pub fn for_mixture(kind: RewardKind, data: &GaussianMixture) -> Self {
        Self {
            kind,
            targets: data.centers.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn check(k: &RewardKind) -> Result<()> {
            match k {
                RewardKind::TargetDistance => Ok(()),
                RewardKind::Quantized { step } if *step > 0.0 => Ok(()),
                RewardKind::Quantized { step } => {
                    Err(Error::Config(format!("quantization step must be positive, got {step}")))
                }
                RewardKind::Composite { parts } => parts.iter().try_for_each(|p| check(&p.kind)),
            }
        }
        if self.targets.is_empty() {
            return Err(Error::Config("reward needs at least one target".into()));
        }
        check(&self.kind)
    }

    pub fn evaluate(&self, x: &[f64], cond: usize) -> Result<f64> {
        let target = self.targets.get(cond).ok_or(Error::UnknownCondition(cond))?;
        if target.len() != x.len() {
            return Err(Error::Dimension {
                expected: target.len(),
                got: x.len(),
            });
        }
        let dist = x
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Ok(eval_kind(&self.kind, dist))
    }
}

fn eval_kind(kind: &RewardKind, dist: f64) -> f64 {
    match kind {
        RewardKind::TargetDistance => -dist,
        RewardKind::Quantized { step } => step * (-dist / step).floor(),
        RewardKind::Composite { parts } => parts.iter().map(|p| p.weight * eval_kind(&p.kind, dist)).sum(),
    }
}

impl RewardModel for RewardSpec {
    fn score(&self, x: &[f64], cond: usize) -> Result<f64> {
        self.evaluate(x, cond)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Trace of the unbiased (n − 1) sample covariance of the samples, computed
/// from pairwise differences so identical samples give exactly 0.
pub fn group_diversity(samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::GroupTooSmall {
            min: 2,
            got: samples.len(),
        });
    }
    let n = samples.len();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += samples[i]
                .iter()
                .zip(&samples[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    Ok(sum / (n * (n - 1)) as f64)
}

/// Population standard deviation of a group's rewards.
pub fn group_contrast(rewards: &[f64]) -> Result<f64> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall {
            min: 2,
            got: rewards.len(),
        });
    }
    Ok(population_std(rewards))
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation. Returns 0 when either ranking is constant.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(Error::GroupTooSmall { min: 3, got: a.len() });
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let (ma, mb) = (mean(&ra), mean(&rb));
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Energy distance 2E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖ (V-statistic).
pub fn energy_distance(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    let cross = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for p in a {
            for q in b {
                s += euclid(p, q);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    2.0 * cross(xs, ys) - cross(xs, xs) - cross(ys, ys)
}
