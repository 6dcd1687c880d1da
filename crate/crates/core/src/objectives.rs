//! Exploitation objectives over recorded trajectories: clipped GRPO, DDPO
//! and online DPO, plus the trajectory-imitation form of their gradients.
//!
//! Every loss here is a quantity to minimize (the negated objective). Each
//! transition is Gaussian, `x_{t-1} ~ N(μ_θ(x_t, t, c), ε²Δt·I)`, so log-density
//! ratios between two models reduce to differences of squared residuals.

use serde::{Deserialize, Serialize};

use crate::accum::{try_accumulate, LossGrad};
use crate::flow::VelocityModel;
use crate::group::RolloutGroup;
use crate::report::{relative_l2, Report};
use crate::rng::{sample_without_replacement, NoiseKey};
use crate::sde::score_term;
use crate::trajectory::Trajectory;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub rewards: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub advantages: Vec<f64>,
    pub eps_guard: f64,
}

/// A_k = (r_k − mean)/(std + guard), clamped to ±`adv_clip`.
pub fn group_advantages(rewards: &[f64], guard: f64, adv_clip: f64) -> Result<AdvantageSet> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall {
            min: 2,
            got: rewards.len(),
        });
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    let degenerate = rewards.iter().all(|&r| r == rewards[0]);
    let advantages = rewards
        .iter()
        .map(|&r| {
            if degenerate {
                0.0
            } else {
                ((r - mean) / (std + guard)).clamp(-adv_clip, adv_clip)
            }
        })
        .collect();
    Ok(AdvantageSet {
        rewards: rewards.to_vec(),
        mean,
        std,
        advantages,
        eps_guard: guard,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub epsilon: f64,
    pub adv_clip: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            adv_clip: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionFlags {
    /// ρ ≤ 1 − ε
    pub u1: bool,
    /// ρ ≥ 1 + ε
    pub u2: bool,
    /// A < 0
    pub v1: bool,
}

/// Region of the clipped surrogate; the flag is true where its gradient vanishes.
pub fn classify_region(rho: f64, adv: f64, clip: &ClipConfig) -> (RegionFlags, bool) {
    let flags = RegionFlags {
        u1: rho <= 1.0 - clip.epsilon,
        u2: rho >= 1.0 + clip.epsilon,
        v1: adv < 0.0,
    };
    let zero = (flags.u1 && flags.v1) || (flags.u2 && !flags.v1);
    (flags, zero)
}

/// min(ρA, clip(ρ, 1−ε, 1+ε)·A).
pub fn grpo_surrogate(rho: f64, adv: f64, clip: &ClipConfig) -> f64 {
    let clipped = rho.clamp(1.0 - clip.epsilon, 1.0 + clip.epsilon);
    (rho * adv).min(clipped * adv)
}

/// Which transitions enter a loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Subsample {
    /// Fraction of eligible transitions; values ≥ 1 keep all of them.
    pub fraction: f64,
    pub key: NoiseKey,
}

impl Subsample {
    pub fn all() -> Self {
        Self {
            fraction: 1.0,
            key: NoiseKey::new(crate::rng::Stream::Timesteps, 0),
        }
    }

    pub fn new(fraction: f64, key: NoiseKey) -> Self {
        Self { fraction, key }
    }

    /// Uniform subset without replacement of `max(1, ⌊n·fraction⌋)` steps.
    pub fn pick(&self, steps: &[usize], salt: u64) -> Vec<usize> {
        let n = steps.len();
        if n == 0 {
            return Vec::new();
        }
        if self.fraction >= 1.0 {
            return steps.to_vec();
        }
        let count = ((n as f64 * self.fraction).floor() as usize).clamp(1, n);
        let mut rng = self.key.traj(self.key.traj.wrapping_add(salt)).rng();
        sample_without_replacement(&mut rng, n, count)
            .into_iter()
            .map(|i| steps[i])
            .collect()
    }
}

/// Geometry of one recorded stochastic transition.
struct Step<'a> {
    x: &'a [f64],
    obs: &'a [f64],
    t: f64,
    dt: f64,
    variance: f64,
    /// ½ε²
    half_eps2: f64,
    cond: usize,
}

impl<'a> Step<'a> {
    fn of(traj: &'a Trajectory, i: usize) -> Result<Self> {
        let tr = traj
            .transitions
            .get(i)
            .ok_or_else(|| Error::MissingTransition(format!("step {i} (trajectory has {})", traj.transitions.len())))?;
        let obs = traj
            .states
            .get(i + 1)
            .ok_or_else(|| Error::MissingTransition(format!("state after step {i}")))?;
        if !tr.is_stochastic() {
            return Err(Error::DegenerateTransition(tr.variance));
        }
        let dt = tr.dt();
        Ok(Self {
            x: &traj.states[i],
            obs,
            t: tr.t_from,
            dt,
            variance: tr.variance,
            half_eps2: 0.5 * tr.variance / dt,
            cond: traj.cond,
        })
    }

    fn mean(&self, v: &[f64]) -> Vec<f64> {
        let s = score_term(self.x, v, self.t, 0.0).expect("stochastic steps have t > 0");
        self.x
            .iter()
            .zip(v)
            .zip(&s)
            .map(|((xi, vi), si)| xi - self.dt * (vi - self.half_eps2 * si))
            .collect()
    }

    /// ∂μ/∂v.
    fn coeff(&self) -> f64 {
        -self.dt * (1.0 - self.half_eps2 * (1.0 - self.t) / self.t)
    }

    fn residual(&self, mu: &[f64]) -> Vec<f64> {
        mu.iter().zip(self.obs).map(|(m, o)| m - o).collect()
    }
}

fn sq(r: &[f64]) -> f64 {
    r.iter().map(|a| a * a).sum()
}

/// Squared residual ‖μ_model − x_{t−1}‖² of a transition (no gradient).
fn residual_sq(model: &VelocityModel, step: &Step) -> f64 {
    let v = model.forward(step.x, step.t, step.cond);
    sq(&step.residual(&step.mean(&v)))
}

/// log p_θ(x_{t−1} | x_t) − log p_old(x_{t−1} | x_t) for transition `i`.
pub fn log_ratio(model: &VelocityModel, old: &VelocityModel, traj: &Trajectory, i: usize) -> Result<f64> {
    let st = Step::of(traj, i)?;
    Ok((residual_sq(old, &st) - residual_sq(model, &st)) / (2.0 * st.variance))
}

/// Log-density of transition `i` under `model`, full Gaussian normalizer included.
pub fn transition_log_prob(model: &VelocityModel, traj: &Trajectory, i: usize) -> Result<f64> {
    let st = Step::of(traj, i)?;
    let v = model.forward(st.x, st.t, st.cond);
    crate::sde::gaussian_log_density(&st.mean(&v), st.variance, st.obs)
}

/// Adds `scale · coefficient · ∇_θ log p_θ(transition)` into `grad` and
/// returns (ρ, squared residual under the current model).
fn log_prob_grad(
    model: &VelocityModel,
    st: &Step,
    scale: impl FnOnce(f64) -> Option<f64>,
    old_residual_sq: f64,
    grad: &mut [f64],
) -> f64 {
    let (v, tape) = model.forward_tape(st.x, st.t, st.cond);
    let r = st.residual(&st.mean(&v));
    let rho = ((old_residual_sq - sq(&r)) / (2.0 * st.variance)).exp();
    if let Some(w) = scale(rho) {
        // ∂ log p/∂v = −coeff·(μ − x_{t−1})/σ²
        let c = -w * st.coeff() / st.variance;
        let dv: Vec<f64> = r.iter().map(|ri| c * ri).collect();
        model.backward(&tape, &dv, grad);
    }
    rho
}

/// Clipped-surrogate loss of one transition, `−scale·min(ρA, clip(ρ)A)`, with its gradient.
#[allow(clippy::too_many_arguments)]
pub fn grpo_transition(
    model: &VelocityModel,
    old: &VelocityModel,
    traj: &Trajectory,
    i: usize,
    adv: f64,
    clip: &ClipConfig,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let st = Step::of(traj, i)?;
    let old_sq = residual_sq(old, &st);
    let mut value = 0.0;
    log_prob_grad(
        model,
        &st,
        |rho| {
            value = grpo_surrogate(rho, adv, clip);
            let (_, zero) = classify_region(rho, adv, clip);
            // d(−scale·ρA)/dθ = −scale·A·ρ·∇log p
            (!zero).then_some(-scale * adv * rho)
        },
        old_sq,
        grad,
    );
    Ok(-scale * value)
}

struct Item<'a> {
    traj: &'a Trajectory,
    step: usize,
    weight: f64,
    scale: f64,
}

fn plan_group_items<'a>(
    groups: &'a [&'a RolloutGroup],
    sub: &Subsample,
    weight_of: impl Fn(&RolloutGroup, usize) -> f64,
    pooled: bool,
) -> Result<Vec<Item<'a>>> {
    let mut per_group = Vec::with_capacity(groups.len());
    for (gi, g) in groups.iter().enumerate() {
        g.check_window()?;
        let steps = sub.pick(&g.optimizable_steps(), gi as u64);
        per_group.push(steps);
    }
    let total: usize = groups
        .iter()
        .zip(&per_group)
        .map(|(g, s)| g.len() * s.len())
        .sum();
    let active = groups
        .iter()
        .zip(&per_group)
        .filter(|(g, s)| g.len() * s.len() > 0)
        .count();
    let mut items = Vec::with_capacity(total);
    for (g, steps) in groups.iter().zip(&per_group) {
        let n = g.len() * steps.len();
        if n == 0 {
            continue;
        }
        let scale = if pooled {
            1.0 / total as f64
        } else {
            1.0 / (n as f64 * active as f64)
        };
        for (k, traj) in g.trajectories.iter().enumerate() {
            for &s in steps {
                if traj.transitions.get(s).is_none() {
                    return Err(Error::MissingTransition(format!("member {k} lacks step {s}")));
                }
                items.push(Item {
                    traj,
                    step: s,
                    weight: weight_of(g, k),
                    scale,
                });
            }
        }
    }
    Ok(items)
}

/// Negative mean clipped surrogate over sampled (member, step) pairs, averaged
/// over groups.
pub fn grpo_loss(
    model: &VelocityModel,
    old: &VelocityModel,
    groups: &[&RolloutGroup],
    clip: &ClipConfig,
    sub: &Subsample,
) -> Result<LossGrad> {
    let items = plan_group_items(groups, sub, |g, k| g.advantages.advantages[k], false)?;
    try_accumulate(items.len(), model.num_params(), |i, grad| {
        let it = &items[i];
        grpo_transition(model, old, it.traj, it.step, it.weight, clip, it.scale, grad)
    })
}

/// One term of the imitation form: `weight` multiplies ω(t)·‖μ_θ − x_{t−1}‖².
#[derive(Debug, Clone, Copy)]
pub struct ImitationTerm<'a> {
    pub traj: &'a Trajectory,
    pub step: usize,
    pub weight: f64,
}

/// ∇_θ Σ_i −ω_i·w_i·‖μ_θ(x_i, t_i, c) − x_{i−1}‖² with ω_i = `omega_scale`/(2ε²Δt).
pub fn imitation_form_gradient(
    model: &VelocityModel,
    terms: &[ImitationTerm],
    omega_scale: f64,
) -> Result<Vec<f64>> {
    let out = try_accumulate(terms.len(), model.num_params(), |i, grad| {
        let term = &terms[i];
        let st = Step::of(term.traj, term.step)?;
        let omega = omega_scale / (2.0 * st.variance);
        let (v, tape) = model.forward_tape(st.x, st.t, st.cond);
        let r = st.residual(&st.mean(&v));
        // ∂/∂v of −ω·w·‖r‖² = −2ω·w·coeff·r
        let c = -2.0 * omega * term.weight * st.coeff();
        let dv: Vec<f64> = r.iter().map(|ri| c * ri).collect();
        model.backward(&tape, &dv, grad);
        Ok::<_, Error>(-omega * term.weight * sq(&r))
    })?;
    Ok(out.grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DdpoAggregation {
    /// Mean within each condition's group, then across groups.
    Group,
    /// One pooled mean over every sampled transition.
    Global,
}

/// Importance-weighted policy gradient with raw rewards: −mean(ρ·r(x_0)).
pub fn ddpo_loss(
    model: &VelocityModel,
    old: &VelocityModel,
    groups: &[&RolloutGroup],
    sub: &Subsample,
    aggregation: DdpoAggregation,
) -> Result<LossGrad> {
    let pooled = aggregation == DdpoAggregation::Global;
    let items = plan_group_items(groups, sub, |g, k| g.rewards()[k], pooled)?;
    try_accumulate(items.len(), model.num_params(), |i, grad| {
        let it = &items[i];
        let st = Step::of(it.traj, it.step)?;
        let old_sq = residual_sq(old, &st);
        let rho = log_prob_grad(model, &st, |rho| Some(-it.scale * it.weight * rho), old_sq, grad);
        Ok::<_, Error>(-it.scale * it.weight * rho)
    })
}

fn log_sigmoid(m: f64) -> f64 {
    // −softplus(−m)
    if m >= 0.0 {
        -(-m).exp().ln_1p()
    } else {
        m - m.exp().ln_1p()
    }
}

fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

fn pair_steps(winner: &Trajectory, loser: &Trajectory) -> Result<Vec<usize>> {
    if winner.states == loser.states {
        return Err(Error::DegeneratePair);
    }
    if winner.cond != loser.cond || winner.knots != loser.knots || winner.start_knot != loser.start_knot {
        return Err(Error::InvalidArgument("preference pair must share condition and grid".into()));
    }
    Ok((0..winner.transitions.len().min(loser.transitions.len()))
        .filter(|&i| winner.transitions[i].is_stochastic() && loser.transitions[i].is_stochastic())
        .collect())
}

/// Per-step preference margins m_t = β·Δlog-ratio(winner) − β·Δlog-ratio(loser).
pub fn dpo_margins(
    model: &VelocityModel,
    reference: &VelocityModel,
    winner: &Trajectory,
    loser: &Trajectory,
    beta: f64,
    steps: &[usize],
) -> Result<Vec<f64>> {
    steps
        .iter()
        .map(|&i| {
            let lw = log_ratio(model, reference, winner, i)?;
            let ll = log_ratio(model, reference, loser, i)?;
            Ok(beta * lw - beta * ll)
        })
        .collect()
}

/// Steps shared by a preference pair after subsampling.
pub fn dpo_steps(winner: &Trajectory, loser: &Trajectory, sub: &Subsample) -> Result<Vec<usize>> {
    Ok(sub.pick(&pair_steps(winner, loser)?, 0))
}

/// −mean_t log σ(m_t) against a frozen reference model.
pub fn dpo_loss(
    model: &VelocityModel,
    reference: &VelocityModel,
    winner: &Trajectory,
    loser: &Trajectory,
    beta: f64,
    sub: &Subsample,
) -> Result<LossGrad> {
    let steps = dpo_steps(winner, loser, sub)?;
    if steps.is_empty() {
        return Err(Error::MissingTransition("pair has no stochastic transitions".into()));
    }
    let inv_n = 1.0 / steps.len() as f64;
    try_accumulate(steps.len(), model.num_params(), |j, grad| {
        let i = steps[j];
        let sw = Step::of(winner, i)?;
        let sl = Step::of(loser, i)?;
        let (ref_w, ref_l) = (residual_sq(reference, &sw), residual_sq(reference, &sl));
        // First pass: the margin needs both residuals before the weights are known.
        let vw = model.forward(sw.x, sw.t, sw.cond);
        let vl = model.forward(sl.x, sl.t, sl.cond);
        let qw = sq(&sw.residual(&sw.mean(&vw)));
        let ql = sq(&sl.residual(&sl.mean(&vl)));
        let m = beta * (ref_w - qw) / (2.0 * sw.variance) - beta * (ref_l - ql) / (2.0 * sl.variance);
        // d(−log σ(m))/dm = −(1 − σ(m))
        let w = -(1.0 - sigmoid(m)) * inv_n * beta;
        log_prob_grad(model, &sw, |_| Some(w), ref_w, grad);
        log_prob_grad(model, &sl, |_| Some(-w), ref_l, grad);
        Ok::<_, Error>(-log_sigmoid(m) * inv_n)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityTolerances {
    pub relative: f64,
}

impl Default for IdentityTolerances {
    fn default() -> Self {
        Self { relative: 1e-8 }
    }
}

/// Checks the gradient identities of the three objectives on `group`'s
/// recorded transitions. `old` generated the transitions; `model` is a
/// perturbed policy used for off-policy and clipped cases.
pub fn verify_identities(
    model: &VelocityModel,
    old: &VelocityModel,
    group: &RolloutGroup,
    beta: f64,
    tol: &IdentityTolerances,
) -> Result<Report> {
    let mut report = Report::default();
    let steps = group.optimizable_steps();
    let n = (group.len() * steps.len()) as f64;
    let all = Subsample::all();

    // GRPO, unclipped: ∇loss = −∇(imitation with weights ρ·A/N).
    let wide = ClipConfig {
        epsilon: 1e6,
        adv_clip: f64::INFINITY,
    };
    for (name, theta) in [("grpo_unclipped_on_policy", old), ("grpo_unclipped_off_policy", model)] {
        let lg = grpo_loss(theta, old, &[group], &wide, &all)?;
        let mut terms = Vec::new();
        for (k, traj) in group.trajectories.iter().enumerate() {
            for &s in &steps {
                let rho = log_ratio(theta, old, traj, s)?.exp();
                terms.push(ImitationTerm {
                    traj,
                    step: s,
                    weight: rho * group.advantages.advantages[k] / n,
                });
            }
        }
        let imit = imitation_form_gradient(theta, &terms, 1.0)?;
        let neg: Vec<f64> = imit.iter().map(|g| -g).collect();
        report.below(name, relative_l2(&lg.grad, &neg), tol.relative);
    }

    // GRPO, clipped: pick ε and the advantage sign so each transition lands in
    // a zero-gradient region; the gradient must vanish exactly.
    let mut worst: f64 = 0.0;
    let mut cases = 0usize;
    for traj in &group.trajectories {
        for &s in &steps {
            let rho = log_ratio(model, old, traj, s)?.exp();
            if rho == 1.0 {
                continue;
            }
            let clip = ClipConfig {
                epsilon: 0.5 * (rho - 1.0).abs(),
                adv_clip: f64::INFINITY,
            };
            let adv = if rho > 1.0 { 1.0 } else { -1.0 };
            let mut grad = vec![0.0; model.num_params()];
            grpo_transition(model, old, traj, s, adv, &clip, 1.0, &mut grad)?;
            worst = worst.max(grad.iter().fold(0.0, |m: f64, g| m.max(g.abs())));
            cases += 1;
        }
    }
    report.check("grpo_clipped_zero_gradient", worst, 0.0, worst == 0.0 && cases > 0);

    // DDPO: ∇loss = −∇(imitation with weights ρ·r/N).
    let lg = ddpo_loss(model, old, &[group], &all, DdpoAggregation::Group)?;
    let mut terms = Vec::new();
    for (k, traj) in group.trajectories.iter().enumerate() {
        for &s in &steps {
            let rho = log_ratio(model, old, traj, s)?.exp();
            terms.push(ImitationTerm {
                traj,
                step: s,
                weight: rho * group.rewards()[k] / n,
            });
        }
    }
    let imit = imitation_form_gradient(model, &terms, 1.0)?;
    let neg: Vec<f64> = imit.iter().map(|g| -g).collect();
    report.below("ddpo_reward_weighted_imitation", relative_l2(&lg.grad, &neg), tol.relative);

    // DPO: ∇loss = −mean_t (1 − σ(m_t))·∇(imitation difference) with ω = β/(2ε²Δt).
    let (w, l) = best_and_worst(group);
    let (winner, loser) = (&group.trajectories[w], &group.trajectories[l]);
    let lg = dpo_loss(model, old, winner, loser, beta, &all)?;
    let dsteps = dpo_steps(winner, loser, &all)?;
    let margins = dpo_margins(model, old, winner, loser, beta, &dsteps)?;
    let inv = 1.0 / dsteps.len() as f64;
    let mut terms = Vec::new();
    for (&s, &m) in dsteps.iter().zip(&margins) {
        let f = (1.0 - sigmoid(m)) * inv;
        terms.push(ImitationTerm { traj: winner, step: s, weight: f });
        terms.push(ImitationTerm { traj: loser, step: s, weight: -f });
    }
    let imit = imitation_form_gradient(model, &terms, beta)?;
    let neg: Vec<f64> = imit.iter().map(|g| -g).collect();
    report.below("dpo_sigmoid_weighted_imitation", relative_l2(&lg.grad, &neg), tol.relative);
    Ok(report)
}

fn best_and_worst(group: &RolloutGroup) -> (usize, usize) {
    let r = group.rewards();
    let mut best = 0;
    let mut worst = 0;
    for k in 1..r.len() {
        if r[k] > r[best] {
            best = k;
        }
        if r[k] < r[worst] {
            worst = k;
        }
    }
    if best == worst {
        worst = if best == 0 { 1 } else { 0 };
    }
    (best, worst)
}
