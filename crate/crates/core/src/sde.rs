//! Stochastic exploration: Euler–Maruyama steps of the flow SDE, recorded
//! rollouts and the Gaussian transition densities the policy objectives use.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::flow::{TimeGrid, VelocityModel};
use crate::rng::NoiseKey;
use crate::trajectory::{Trajectory, Transition};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// ε_t = η.
    Constant,
    /// ε_t = η·t, evaluated at the source time of each step.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub eta: f64,
    pub mode: ScheduleMode,
    /// Smallest positive grid knot; steps landing on t = 0 are deterministic.
    pub t_floor: f64,
}

impl NoiseSchedule {
    pub fn constant(eta: f64, grid: &TimeGrid) -> Self {
        Self {
            eta,
            mode: ScheduleMode::Constant,
            t_floor: grid.t_floor(),
        }
    }

    /// ε for the step `t_from → t_to`.
    pub fn epsilon(&self, t_from: f64, t_to: f64) -> f64 {
        if t_to <= 0.0 {
            return 0.0;
        }
        match self.mode {
            ScheduleMode::Constant => self.eta,
            ScheduleMode::Linear => self.eta * t_from,
        }
    }
}

/// (x − (1−t)·x̂0)/t² with x̂0 = x − t·v.
pub fn score_term(x: &[f64], v: &[f64], t: f64, t_floor: f64) -> Result<Vec<f64>> {
    if !(t > t_floor) {
        return Err(Error::ScoreSingular { t, floor: t_floor });
    }
    let t2 = t * t;
    Ok(x.iter()
        .zip(v)
        .map(|(xi, vi)| {
            let x0_hat = xi - t * vi;
            (xi - (1.0 - t) * x0_hat) / t2
        })
        .collect())
}

/// Mean of one SDE step: μ = x − Δt·(v − ½ε²·score).
pub fn transition_mean(
    x: &[f64],
    v: &[f64],
    t_from: f64,
    t_to: f64,
    eps: f64,
    t_floor: f64,
) -> Result<Vec<f64>> {
    let dt = t_from - t_to;
    if eps == 0.0 {
        return Ok(x.iter().zip(v).map(|(xi, vi)| xi - dt * vi).collect());
    }
    let s = score_term(x, v, t_from, t_floor)?;
    let half = 0.5 * eps * eps;
    Ok(x.iter()
        .zip(v)
        .zip(&s)
        .map(|((xi, vi), si)| xi - dt * (vi - half * si))
        .collect())
}

/// ∂μ/∂v (a multiple of the identity) for the step `t_from → t_to`.
pub fn mean_velocity_coefficient(t_from: f64, t_to: f64, eps: f64) -> f64 {
    let dt = t_from - t_to;
    if eps == 0.0 {
        return -dt;
    }
    // score = (x + (1−t)·v)/t, so ∂score/∂v = (1−t)/t
    -dt * (1.0 - 0.5 * eps * eps * (1.0 - t_from) / t_from)
}

/// Gaussian transition summary: N(mean, variance·I) evaluated at `observed`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionStats {
    pub mean: Vec<f64>,
    pub variance: f64,
    pub observed: Vec<f64>,
}

/// −‖μ − x‖²/(2σ²) − (d/2)·log(2πσ²).
pub fn gaussian_log_density(mean: &[f64], variance: f64, observed: &[f64]) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::DegenerateTransition(variance));
    }
    let sq: f64 = mean.iter().zip(observed).map(|(m, o)| (m - o) * (m - o)).sum();
    let d = mean.len() as f64;
    Ok(-sq / (2.0 * variance) - 0.5 * d * (2.0 * PI * variance).ln())
}

pub fn transition_log_density(stats: &TransitionStats) -> Result<f64> {
    gaussian_log_density(&stats.mean, stats.variance, &stats.observed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: Vec<f64>,
    pub velocity: Vec<f64>,
    pub stats: TransitionStats,
    pub eps: f64,
}

/// One Euler–Maruyama step with a caller-supplied standard-normal draw `z`.
#[allow(clippy::too_many_arguments)]
pub fn sde_step(
    model: &VelocityModel,
    x: &[f64],
    cond: usize,
    t_from: f64,
    t_to: f64,
    sched: &NoiseSchedule,
    z: &[f64],
    step: usize,
) -> Result<StepOutcome> {
    let v = model.forward(x, t_from, cond);
    step_with_velocity(x, v, t_from, t_to, sched, z, step)
}

fn step_with_velocity(
    x: &[f64],
    v: Vec<f64>,
    t_from: f64,
    t_to: f64,
    sched: &NoiseSchedule,
    z: &[f64],
    step: usize,
) -> Result<StepOutcome> {
    if !(t_from > t_to && t_to >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sde_step needs t_from > t_to >= 0, got {t_from} -> {t_to}"
        )));
    }
    let eps = sched.epsilon(t_from, t_to);
    let dt = t_from - t_to;
    let mean = transition_mean(x, &v, t_from, t_to, eps, sched.t_floor)?;
    let scale = eps * dt.sqrt();
    let next: Vec<f64> = if eps == 0.0 {
        mean.clone()
    } else {
        mean.iter().zip(z).map(|(m, zi)| m + scale * zi).collect()
    };
    if next.iter().chain(&v).any(|a| !a.is_finite()) {
        return Err(Error::NonFinite { stage: "sde_step", step });
    }
    Ok(StepOutcome {
        stats: TransitionStats {
            mean,
            variance: eps * eps * dt,
            observed: next.clone(),
        },
        next,
        velocity: v,
        eps,
    })
}

/// Continues `traj` down to knot `stop_at`, drawing step noise from
/// `key.step(source knot)`. Caches the policy velocity at the final state when
/// the trajectory is left partial; a cached velocity is used for the first
/// step of a later continuation, so it must have come from `model`.
pub fn extend_rollout(
    model: &VelocityModel,
    traj: &mut Trajectory,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    key: NoiseKey,
    stop_at: usize,
) -> Result<()> {
    if stop_at > traj.current_knot() {
        return Err(Error::Window(format!(
            "cannot stop at knot {stop_at}: trajectory already at knot {}",
            traj.current_knot()
        )));
    }
    let d = traj.dim();
    while traj.current_knot() > stop_at {
        let n = traj.current_knot();
        let (t_from, t_to) = (grid.t(n), grid.t(n - 1));
        let step_key = key.step(n as u64);
        let eps = sched.epsilon(t_from, t_to);
        let z = if eps > 0.0 { step_key.normal_vec(d) } else { vec![0.0; d] };
        let out = match traj.tail_velocity.take() {
            Some(v) => step_with_velocity(traj.last(), v, t_from, t_to, sched, &z, grid.steps() - n)?,
            None => sde_step(model, traj.last(), traj.cond, t_from, t_to, sched, &z, grid.steps() - n)?,
        };
        let stochastic = out.stats.variance > 0.0;
        traj.push(
            Transition {
                from_knot: n,
                t_from,
                t_to,
                velocity: out.velocity,
                mean: out.stats.mean,
                variance: out.stats.variance,
                noise: stochastic.then_some(z),
                key: stochastic.then_some(step_key),
            },
            out.next,
        );
    }
    if !traj.is_complete() && traj.tail_velocity.is_none() {
        traj.tail_velocity = Some(model.forward(traj.last(), traj.current_t(), traj.cond));
    }
    Ok(())
}

/// Samples one trajectory per initial state from t = 1 down to knot `stop_at`.
/// Trajectory `k` draws from `key.traj(k)`.
pub fn rollout(
    model: &VelocityModel,
    init: &[Vec<f64>],
    grid: &TimeGrid,
    cond: usize,
    sched: &NoiseSchedule,
    key: NoiseKey,
    stop_at: usize,
) -> Result<Vec<Trajectory>> {
    if init.is_empty() {
        return Err(Error::InvalidArgument("rollout needs at least one initial state".into()));
    }
    if stop_at > grid.steps() {
        return Err(Error::Window(format!(
            "stop_at {stop_at} exceeds grid steps {}",
            grid.steps()
        )));
    }
    model.check_condition(cond)?;
    for x in init {
        if x.len() != model.data_dim() {
            return Err(Error::Dimension {
                expected: model.data_dim(),
                got: x.len(),
            });
        }
    }
    init.par_iter()
        .enumerate()
        .map(|(k, x)| {
            let mut tr = Trajectory::new(cond, grid.knots().to_vec(), x.clone());
            extend_rollout(model, &mut tr, grid, sched, key.traj(k as u64), stop_at)?;
            Ok(tr)
        })
        .collect()
}

/// Recomputes every state from the start state and the recorded draws.
pub fn replay(model: &VelocityModel, traj: &Trajectory, sched: &NoiseSchedule) -> Result<Trajectory> {
    let mut out = Trajectory::new(traj.cond, traj.knots.clone(), traj.initial().to_vec());
    out.start_knot = traj.start_knot;
    let d = traj.dim();
    for (i, tr) in traj.transitions.iter().enumerate() {
        let z = tr.noise.clone().unwrap_or_else(|| vec![0.0; d]);
        let o = sde_step(model, out.last(), traj.cond, tr.t_from, tr.t_to, sched, &z, i)?;
        let stochastic = o.stats.variance > 0.0;
        out.push(
            Transition {
                from_knot: tr.from_knot,
                t_from: tr.t_from,
                t_to: tr.t_to,
                velocity: o.velocity,
                mean: o.stats.mean,
                variance: o.stats.variance,
                noise: stochastic.then_some(z),
                key: tr.key,
            },
            o.next,
        );
    }
    out.tail_velocity = traj.tail_velocity.clone();
    out.coarse_pred = traj.coarse_pred.clone();
    Ok(out)
}
