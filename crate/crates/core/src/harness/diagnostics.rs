use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use super::config::ExperimentConfig;
use crate::dgr::init_group_noises;
use crate::flow::{predict_from_velocity, VelocityModel};
use crate::group::Granularity;
use crate::rewards::{group_contrast, group_diversity, rank_correlation, RewardSpec};
use crate::rng::{NoiseKey, Stream};
use crate::sde::{rollout, NoiseSchedule};
use crate::{Error, Result};

/// One seed of the fine-versus-coarse group comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub seed: usize,
    pub cond: usize,
    pub coarse_diversity: f64,
    pub fine_diversity: f64,
    /// Diversity of the fine group's initial states (shared noise).
    pub fine_initial_diversity: f64,
    pub coarse_contrast: f64,
    pub fine_contrast: f64,
}

/// Rank agreement between perception rewards at one knot and endpoint rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub knot: usize,
    pub t: f64,
    pub mean_spearman: f64,
}

fn cond_for(seed: usize, cfg: &ExperimentConfig) -> usize {
    seed % cfg.data.n_modes
}

/// For each seed, rolls out one fine and one coarse group of
/// `rollout.group_size` members to the clean end and compares the spread of
/// their final samples and rewards. Both groups share step-noise keys.
pub fn diversity_study(model: &VelocityModel, cfg: &ExperimentConfig, seeds: usize) -> Result<Vec<DiversityRow>> {
    let grid = cfg.time_grid()?;
    let sched = NoiseSchedule::constant(cfg.rollout.eta, &grid);
    let reward = cfg.reward_spec();
    let k = cfg.rollout.group_size;
    let d = model.data_dim();
    (0..seeds)
        .into_par_iter()
        .map(|s| {
            let cond = cond_for(s, cfg);
            let key = NoiseKey::new(Stream::Diagnostics, cfg.seed).iter(s as u64).cond(cond as u64);
            let init_key = key.step(u64::MAX);
            let mut out = Vec::with_capacity(2);
            let mut fine_init = 0.0;
            for gran in [Granularity::Coarse, Granularity::Fine] {
                let init = init_group_noises(gran, k, d, init_key)?;
                if gran == Granularity::Fine {
                    fine_init = group_diversity(&init)?;
                }
                let trajs = rollout(model, &init, &grid, cond, &sched, key, 0)?;
                let ends: Vec<Vec<f64>> = trajs.iter().map(|t| t.last().to_vec()).collect();
                let rewards = ends
                    .iter()
                    .map(|x| reward.evaluate(x, cond))
                    .collect::<Result<Vec<_>>>()?;
                out.push((group_diversity(&ends)?, group_contrast(&rewards)?));
            }
            Ok(DiversityRow {
                seed: s,
                cond,
                coarse_diversity: out[0].0,
                fine_diversity: out[1].0,
                fine_initial_diversity: fine_init,
                coarse_contrast: out[0].1,
                fine_contrast: out[1].1,
            })
        })
        .collect()
}

fn perception_rewards(
    trajs: &[crate::trajectory::Trajectory],
    knot: usize,
    reward: &RewardSpec,
) -> Result<Vec<f64>> {
    trajs
        .iter()
        .map(|tr| {
            let missing = || Error::MissingTransition(format!("no state or velocity at knot {knot}"));
            let x = tr.state_at_knot(knot).ok_or_else(missing)?;
            let v = tr.velocity_at_knot(knot).ok_or_else(missing)?;
            reward.evaluate(&predict_from_velocity(x, v, tr.knots[knot]), tr.cond)
        })
        .collect()
}

/// Mean Spearman correlation, over `seeds` coarse groups, between rewards of
/// single-step perceptions taken at each probe knot and rewards of the
/// completed samples. Rows follow `probe_knots` in the order given.
pub fn correlation_sweep(
    model: &VelocityModel,
    cfg: &ExperimentConfig,
    seeds: usize,
    probe_knots: &[usize],
) -> Result<Vec<CorrelationRow>> {
    let grid = cfg.time_grid()?;
    if let Some(&bad) = probe_knots.iter().find(|&&n| n == 0 || n > grid.steps()) {
        return Err(Error::InvalidArgument(format!(
            "probe knot {bad} outside 1..={}",
            grid.steps()
        )));
    }
    if seeds == 0 {
        return Err(Error::InvalidArgument("correlation sweep needs at least one seed".into()));
    }
    let sched = NoiseSchedule::constant(cfg.rollout.eta, &grid);
    let reward = cfg.reward_spec();
    let k = cfg.rollout.group_size;
    let per_seed: Vec<Vec<f64>> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let cond = cond_for(s, cfg);
            let key = NoiseKey::new(Stream::Diagnostics, cfg.seed)
                .iter(s as u64 + (1 << 32))
                .cond(cond as u64);
            let init = init_group_noises(Granularity::Coarse, k, model.data_dim(), key.step(u64::MAX))?;
            let trajs = rollout(model, &init, &grid, cond, &sched, key, 0)?;
            let ends = trajs
                .iter()
                .map(|t| reward.evaluate(t.last(), cond))
                .collect::<Result<Vec<_>>>()?;
            probe_knots
                .iter()
                .map(|&n| rank_correlation(&perception_rewards(&trajs, n, &reward)?, &ends))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(probe_knots
        .iter()
        .enumerate()
        .map(|(j, &n)| CorrelationRow {
            knot: n,
            t: grid.t(n),
            mean_spearman: per_seed.iter().map(|r| r[j]).sum::<f64>() / seeds as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub diversity: Vec<DiversityRow>,
    pub correlation: Vec<CorrelationRow>,
}

impl DiagnosticsReport {
    /// Seeds in which the coarse group ends more spread out than the fine one.
    pub fn coarse_wins(&self) -> usize {
        self.diversity
            .iter()
            .filter(|r| r.coarse_diversity > r.fine_diversity)
            .count()
    }

    pub fn diversity_csv(&self) -> String {
        let mut s = String::from("seed,cond,coarse_diversity,fine_diversity,fine_initial_diversity,coarse_contrast,fine_contrast\n");
        for r in &self.diversity {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.seed, r.cond, r.coarse_diversity, r.fine_diversity, r.fine_initial_diversity, r.coarse_contrast, r.fine_contrast
            );
        }
        s
    }

    pub fn correlation_csv(&self) -> String {
        let mut s = String::from("knot,t,mean_spearman\n");
        for r in &self.correlation {
            let _ = writeln!(s, "{},{},{}", r.knot, r.t, r.mean_spearman);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let n = self.diversity.len().max(1) as f64;
        let mean = |f: fn(&DiversityRow) -> f64| self.diversity.iter().map(f).sum::<f64>() / n;
        let _ = writeln!(s, "group diversity over {} seeds", self.diversity.len());
        let _ = writeln!(s, "  {:<8} {:>12} {:>12}", "", "coarse", "fine");
        let _ = writeln!(s, "  {:<8} {:>12.6} {:>12.6}", "final", mean(|r| r.coarse_diversity), mean(|r| r.fine_diversity));
        let _ = writeln!(s, "  {:<8} {:>12} {:>12.6}", "initial", "", mean(|r| r.fine_initial_diversity));
        let _ = writeln!(s, "  {:<8} {:>12.6} {:>12.6}", "contrast", mean(|r| r.coarse_contrast), mean(|r| r.fine_contrast));
        let _ = writeln!(s, "  coarse > fine in {}/{} seeds", self.coarse_wins(), self.diversity.len());
        let _ = writeln!(s, "perception rank correlation");
        let _ = writeln!(s, "  {:>5} {:>8} {:>10}", "knot", "t", "spearman");
        for r in &self.correlation {
            let _ = writeln!(s, "  {:>5} {:>8.4} {:>10.4}", r.knot, r.t, r.mean_spearman);
        }
        s
    }
}

pub const DIVERSITY_FILE: &str = "diagnostics_diversity.csv";
pub const CORRELATION_FILE: &str = "diagnostics_correlation.csv";
pub const DIAGNOSTICS_SUMMARY_FILE: &str = "diagnostics.txt";

/// Runs both studies on the pretrained model and writes the tables into
/// `cfg.output.dir`.
pub fn run_diagnostics(cfg: &ExperimentConfig) -> Result<DiagnosticsReport> {
    cfg.validate()?;
    let model = super::load_pretrained(cfg)?;
    let report = DiagnosticsReport {
        diversity: diversity_study(&model, cfg, cfg.diagnostics.seeds)?,
        correlation: correlation_sweep(&model, cfg, cfg.diagnostics.correlation_seeds, &cfg.diagnostics.probe_knots)?,
    };
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(DIVERSITY_FILE), report.diversity_csv())?;
    std::fs::write(dir.join(CORRELATION_FILE), report.correlation_csv())?;
    std::fs::write(dir.join(DIAGNOSTICS_SUMMARY_FILE), report.to_text())?;
    Ok(report)
}
