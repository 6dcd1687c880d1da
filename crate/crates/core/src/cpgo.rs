//! Cross-step consistency of single-step clean predictions.
//!
//! For consecutive states (x_t, x_{t−1}) of a recorded trajectory the current
//! model's prediction π_θ(x_t, t) = x_t − t·v_θ is pulled toward the frozen
//! model's prediction from the next state, π_old(x_{t−1}, t−1).

use serde::{Deserialize, Serialize};

use crate::accum::{try_accumulate, LossGrad};
use crate::dgr::dual_group_loss;
use crate::flow::{ode_sample, predict_from_velocity, TimeGrid, VelocityModel};
use crate::group::RolloutGroup;
use crate::objectives::{ClipConfig, Subsample};
use crate::report::Report;
use crate::trajectory::Trajectory;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpgoConfig {
    /// Weight of the consistency term in the combined loss.
    pub omega: f64,
    /// Only steps whose source time is at most `tau` take part.
    pub tau: f64,
    /// Take the old model's velocity at x_{t−1} from the rollout record when
    /// present instead of recomputing it.
    pub reuse_cached_velocity: bool,
}

impl Default for CpgoConfig {
    fn default() -> Self {
        Self {
            omega: 1e-6,
            tau: 0.6,
            reuse_cached_velocity: true,
        }
    }
}

impl CpgoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::Config(format!("cpgo omega must be finite and >= 0, got {}", self.omega)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("cpgo tau must lie in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpgoOutput {
    pub value: LossGrad,
    pub eligible: usize,
    /// Set when no step qualified; the loss is then zero.
    pub empty_warning: bool,
}

/// Target π_old(x_{t−1}, t−1) for transition `i`; no gradient.
fn target(old: &VelocityModel, traj: &Trajectory, i: usize, reuse: bool) -> Vec<f64> {
    let tr = &traj.transitions[i];
    let next = &traj.states[i + 1];
    if tr.t_to == 0.0 {
        return next.clone();
    }
    let cached = if reuse {
        traj.transitions
            .get(i + 1)
            .map(|n| n.velocity.as_slice())
            .or(traj.tail_velocity.as_deref())
    } else {
        None
    };
    match cached {
        Some(v) => predict_from_velocity(next, v, tr.t_to),
        None => predict_from_velocity(next, &old.forward(next, tr.t_to, traj.cond), tr.t_to),
    }
}

/// Mean over eligible steps of ‖π_θ(x_t, t) − π_old(x_{t−1}, t−1)‖².
pub fn cpgo_loss(
    model: &VelocityModel,
    old: &VelocityModel,
    trajs: &[&Trajectory],
    cfg: &CpgoConfig,
) -> Result<CpgoOutput> {
    let mut items = Vec::new();
    for (k, tr) in trajs.iter().enumerate() {
        for (i, st) in tr.transitions.iter().enumerate() {
            if st.t_from <= cfg.tau && st.t_from > 0.0 {
                items.push((k, i));
            }
        }
    }
    let n_params = model.num_params();
    if items.is_empty() {
        return Ok(CpgoOutput {
            value: LossGrad::zeros(n_params),
            eligible: 0,
            empty_warning: true,
        });
    }
    let inv_n = 1.0 / items.len() as f64;
    let value = try_accumulate(items.len(), n_params, |j, grad| {
        let (k, i) = items[j];
        let tr = trajs[k];
        let st = &tr.transitions[i];
        let x = &tr.states[i];
        let tgt = target(old, tr, i, cfg.reuse_cached_velocity);
        let t = st.t_from;
        let (v, tape) = model.forward_tape(x, t, tr.cond);
        let pred = predict_from_velocity(x, &v, t);
        let diff: Vec<f64> = pred.iter().zip(&tgt).map(|(p, q)| p - q).collect();
        // ∂π/∂v = −t
        let dv: Vec<f64> = diff.iter().map(|d| -2.0 * t * d * inv_n).collect();
        model.backward(&tape, &dv, grad);
        let loss = diff.iter().map(|d| d * d).sum::<f64>() * inv_n;
        if !loss.is_finite() {
            return Err(Error::NonFinite { stage: "cpgo_loss", step: i });
        }
        Ok(loss)
    })?;
    Ok(CpgoOutput {
        value,
        eligible: items.len(),
        empty_warning: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub total: LossGrad,
    pub grpo: LossGrad,
    /// Unweighted consistency term.
    pub cpgo: CpgoOutput,
}

/// Dual-group GRPO loss plus ω times the consistency loss over the members of
/// both groups.
pub fn combined_loss(
    model: &VelocityModel,
    old: &VelocityModel,
    g1: &RolloutGroup,
    g2: Option<&RolloutGroup>,
    clip: &ClipConfig,
    sub: &Subsample,
    cfg: &CpgoConfig,
) -> Result<CombinedLoss> {
    let grpo = dual_group_loss(model, old, g1, g2, clip, sub)?;
    let trajs: Vec<&Trajectory> = g1
        .trajectories
        .iter()
        .chain(g2.map(|g| g.trajectories.iter()).into_iter().flatten())
        .collect();
    let cpgo = cpgo_loss(model, old, &trajs, cfg)?;
    let mut total = grpo.clone();
    if cfg.omega != 0.0 {
        total.add_scaled(&cpgo.value, cfg.omega);
    }
    Ok(CombinedLoss { total, grpo, cpgo })
}

/// Start states and conditions of the deterministic probe trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub x1: Vec<f64>,
    pub cond: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub steps: usize,
    /// Largest step size of the grid.
    pub dt: f64,
    pub gap_rms: f64,
    /// gap(this grid) / gap(grid with twice the steps).
    pub ratio_vs_half: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub skipped: usize,
    pub report: Report,
}

impl ScalingReport {
    /// `dt, gap_rms, ratio_vs_half` lines followed by the pass/fail lines.
    pub fn to_text(&self) -> String {
        let mut s = String::from("dt,gap_rms,ratio_vs_half\n");
        for r in &self.rows {
            let ratio = r.ratio_vs_half.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
            s.push_str(&format!("{:.6e},{:.6e},{ratio}\n", r.dt, r.gap_rms));
        }
        s.push_str(&self.report.to_string());
        s
    }
}

/// RMS over all steps and probes of ‖π(x_t, t) − π(x_{t−1}, t−1)‖ along Euler
/// ODE trajectories.
pub fn consistency_gap(model: &VelocityModel, grid: &TimeGrid, probes: &[Probe]) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut skipped = 0usize;
    for p in probes {
        let tr = ode_sample(model, &p.x1, grid, p.cond)?;
        let mut local = Vec::with_capacity(tr.transitions.len());
        let mut ok = true;
        for (i, st) in tr.transitions.iter().enumerate() {
            let a = predict_from_velocity(&tr.states[i], &st.velocity, st.t_from);
            let next = &tr.states[i + 1];
            let b = match tr.transitions.get(i + 1) {
                Some(n) => predict_from_velocity(next, &n.velocity, st.t_to),
                None => next.clone(),
            };
            let g2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
            if !g2.is_finite() {
                ok = false;
                break;
            }
            local.push(g2);
        }
        if ok {
            count += local.len();
            sum += local.iter().sum::<f64>();
        } else {
            skipped += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no finite probe trajectories".into()));
    }
    Ok(((sum / count as f64).sqrt(), skipped))
}

/// Measures the gap on each grid (ascending step counts, each twice the last)
/// and checks the ratios of the `check_last` finest halvings against `band`.
pub fn verify_consistency_scaling(
    model: &VelocityModel,
    step_counts: &[usize],
    shift: f64,
    probes: &[Probe],
    band: (f64, f64),
    check_last: usize,
) -> Result<ScalingReport> {
    if step_counts.len() < 2 || step_counts.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(Error::InvalidArgument("step counts must double successively".into()));
    }
    let mut rows = Vec::new();
    let mut skipped = 0;
    for &n in step_counts {
        let grid = TimeGrid::shifted(n, shift)?;
        let (gap, s) = consistency_gap(model, &grid, probes)?;
        skipped += s;
        rows.push(ScalingRow {
            steps: n,
            dt: grid.max_dt(),
            gap_rms: gap,
            ratio_vs_half: None,
        });
    }
    for i in 0..rows.len() - 1 {
        let r = rows[i].gap_rms / rows[i + 1].gap_rms;
        rows[i].ratio_vs_half = Some(r);
    }
    let mut report = Report::default();
    let ratios: Vec<(usize, f64)> = rows
        .iter()
        .filter_map(|r| r.ratio_vs_half.map(|x| (r.steps, x)))
        .collect();
    for &(steps, ratio) in ratios.iter().rev().take(check_last).rev() {
        let pass = ratio >= band.0 && ratio <= band.1;
        report.check(
            format!("consistency_ratio_{steps}_to_{}", 2 * steps),
            ratio,
            band.1,
            pass,
        );
    }
    Ok(ScalingReport { rows, skipped, report })
}
