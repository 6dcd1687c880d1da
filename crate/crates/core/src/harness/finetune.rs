use std::path::Path;
use std::time::Instant;

use super::config::{ExperimentConfig, Method};
use super::records::{write_metrics, Losses, MetricsRecord};
use crate::accum::LossGrad;
use crate::cpgo::{combined_loss, CpgoConfig};
use crate::dgr::{
    coarse_progress_perception, init_group_noises, refine_fine_grained, select_representatives,
    GranularitySchedule, SelectionRecord,
};
use crate::flow::{checkpoint, ode_sample, TimeGrid, VelocityModel};
use crate::group::{Granularity, RewardSource, RolloutGroup};
use crate::objectives::{ddpo_loss, dpo_loss, Subsample};
use crate::optim::Adam;
use crate::rewards::{group_diversity, population_std, RewardSpec};
use crate::rng::{NoiseKey, Stream};
use crate::sde::{rollout, NoiseSchedule};
use crate::trajectory::{write_trajectories, Trajectory};
use crate::vh::{latent_consistency, rasterize_samples, Bounds};
use crate::{Error, Result};

/// Fixed-key evaluation of a policy: deterministic ODE samples from the same
/// initial noises every time it is called.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub mean_reward: f64,
    pub reward_std: f64,
    pub latent_consistency: f64,
    pub diversity: f64,
}

pub fn evaluate_policy(
    model: &VelocityModel,
    cfg: &ExperimentConfig,
    grid: &TimeGrid,
    reward: &RewardSpec,
) -> Result<(EvalStats, Vec<Trajectory>)> {
    use rayon::prelude::*;
    let n_cond = cfg.data.n_modes;
    let m = cfg.eval.samples_per_cond;
    let items: Vec<(usize, usize)> = (0..n_cond).flat_map(|c| (0..m).map(move |k| (c, k))).collect();
    let trajs: Vec<Trajectory> = items
        .par_iter()
        .map(|&(c, k)| {
            let x1 = NoiseKey::new(Stream::Eval, cfg.seed)
                .cond(c as u64)
                .traj(k as u64)
                .normal_vec(model.data_dim());
            ode_sample(model, &x1, grid, c)
        })
        .collect::<Result<_>>()?;
    let mut rewards = Vec::with_capacity(trajs.len());
    let mut lc = 0.0;
    for tr in &trajs {
        rewards.push(reward.evaluate(tr.endpoint()?, tr.cond)?);
        lc += latent_consistency(tr)?;
    }
    let mut div = 0.0;
    for c in 0..n_cond {
        let ends: Vec<Vec<f64>> = trajs[c * m..(c + 1) * m]
            .iter()
            .map(|t| t.last().to_vec())
            .collect();
        div += group_diversity(&ends)?;
    }
    let n = trajs.len() as f64;
    Ok((
        EvalStats {
            mean_reward: rewards.iter().sum::<f64>() / n,
            reward_std: population_std(&rewards),
            latent_consistency: lc / n,
            diversity: div / n_cond as f64,
        },
        trajs,
    ))
}

/// How a method shapes its groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodPlan {
    pub intra_group: bool,
    pub omega: f64,
}

fn granularity_for(cfg: &ExperimentConfig, sched: &GranularitySchedule, iter: usize) -> Granularity {
    match cfg.method {
        Method::Grpo | Method::Fine => Granularity::Fine,
        Method::Coarse | Method::Dpo | Method::Ddpo => Granularity::Coarse,
        Method::ConsistentRft => sched.granularity(iter),
    }
}

fn plan_for(cfg: &ExperimentConfig, gran: Granularity) -> MethodPlan {
    let selecting = matches!(cfg.method, Method::Fine | Method::Coarse | Method::ConsistentRft);
    let intra = selecting
        && cfg.rollout.intra_group
        && !(cfg.rollout.intra_group_fine_only && gran == Granularity::Coarse);
    MethodPlan {
        intra_group: intra,
        omega: if cfg.method == Method::ConsistentRft { cfg.cpgo.omega } else { 0.0 },
    }
}

/// Groups collected for one condition in one iteration.
struct CondGroups {
    g1: RolloutGroup,
    g2: Option<RolloutGroup>,
    selection: Option<SelectionRecord>,
}

#[allow(clippy::too_many_arguments)]
fn collect_groups(
    old: &VelocityModel,
    cfg: &ExperimentConfig,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    reward: &RewardSpec,
    iter: usize,
    cond: usize,
    gran: Granularity,
    plan: MethodPlan,
) -> Result<CondGroups> {
    let r = &cfg.rollout;
    let o = &cfg.objectives;
    let steps = grid.steps();
    let init_key = NoiseKey::new(Stream::InitialNoise, cfg.seed).iter(iter as u64).cond(cond as u64);
    let step_key = NoiseKey::new(Stream::StepNoise, cfg.seed).iter(iter as u64).cond(cond as u64);
    let noises = init_group_noises(gran, r.group_size, old.data_dim(), init_key)?;
    let score = |xs: &[&[f64]]| -> Result<Vec<f64>> { xs.iter().map(|x| reward.evaluate(x, cond)).collect() };

    if !plan.intra_group {
        let trajs = rollout(old, &noises, grid, cond, sched, step_key, 0)?;
        let ends: Vec<&[f64]> = trajs.iter().map(|t| t.last()).collect();
        let rewards = score(&ends)?;
        let g1 = RolloutGroup::new(gran, trajs, rewards, (steps, 0), RewardSource::Endpoint, o.adv_guard, o.adv_clip)?;
        return Ok(CondGroups {
            g1,
            g2: None,
            selection: None,
        });
    }

    let mut trajs = rollout(old, &noises, grid, cond, sched, step_key, r.perception_knot)?;
    let perceptions = coarse_progress_perception(&mut trajs)?;
    let mut rng = NoiseKey::new(Stream::Clustering, cfg.seed)
        .iter(iter as u64)
        .cond(cond as u64)
        .rng();
    let sel = select_representatives(&perceptions, r.k1, r.kmeans_iters, &mut rng)?;
    let mut g1: Vec<Trajectory> = sel.g1_indices.iter().map(|&i| trajs[i].clone()).collect();
    let keys: Vec<NoiseKey> = sel.g1_indices.iter().map(|&i| step_key.traj(i as u64)).collect();
    refine_fine_grained(old, &mut g1, &keys, grid, sched)?;
    let ends: Vec<&[f64]> = g1.iter().map(|t| t.last()).collect();
    let r1 = score(&ends)?;
    let g2: Vec<Trajectory> = sel.g2_indices.iter().map(|&i| trajs[i].clone()).collect();
    let percs: Vec<&[f64]> = sel.g2_indices.iter().map(|&i| perceptions[i].as_slice()).collect();
    let r2 = score(&percs)?;
    let record = SelectionRecord {
        iter,
        cond,
        granularity: gran,
        g1_indices: sel.g1_indices.clone(),
        g2_indices: sel.g2_indices.clone(),
        inertia: sel.inertia,
    };
    let g1 = RolloutGroup::new(gran, g1, r1, (steps, 0), RewardSource::Endpoint, o.adv_guard, o.adv_clip)?;
    let g2 = if g2.is_empty() {
        None
    } else {
        Some(RolloutGroup::new(
            gran,
            g2,
            r2,
            (steps, r.perception_knot),
            RewardSource::Perception,
            o.adv_guard,
            o.adv_clip,
        )?)
    };
    Ok(CondGroups {
        g1,
        g2,
        selection: Some(record),
    })
}

struct StepLoss {
    total: LossGrad,
    policy: f64,
    cpgo: f64,
    eligible: usize,
}

#[allow(clippy::too_many_arguments)]
fn condition_loss(
    model: &VelocityModel,
    old: &VelocityModel,
    reference: &VelocityModel,
    cfg: &ExperimentConfig,
    groups: &CondGroups,
    plan: MethodPlan,
    sub: &Subsample,
) -> Result<StepLoss> {
    let o = &cfg.objectives;
    match cfg.method {
        Method::Grpo | Method::Fine | Method::Coarse | Method::ConsistentRft => {
            let cpgo_cfg = CpgoConfig {
                omega: plan.omega,
                ..cfg.cpgo
            };
            let c = combined_loss(model, old, &groups.g1, groups.g2.as_ref(), &o.clip(), sub, &cpgo_cfg)?;
            Ok(StepLoss {
                policy: c.grpo.loss,
                cpgo: c.cpgo.value.loss,
                eligible: c.cpgo.eligible,
                total: c.total,
            })
        }
        Method::Ddpo => {
            let lg = ddpo_loss(model, old, &[&groups.g1], sub, o.ddpo_aggregation)?;
            Ok(StepLoss {
                policy: lg.loss,
                cpgo: 0.0,
                eligible: 0,
                total: lg,
            })
        }
        Method::Dpo => {
            let r = groups.g1.rewards();
            let best = (0..r.len()).fold(0, |b, k| if r[k] > r[b] { k } else { b });
            let worst = (0..r.len()).fold(0, |w, k| if r[k] < r[w] { k } else { w });
            if best == worst {
                // no preference signal in this group
                return Ok(StepLoss {
                    total: LossGrad::zeros(model.num_params()),
                    policy: 0.0,
                    cpgo: 0.0,
                    eligible: 0,
                });
            }
            let t = &groups.g1.trajectories;
            let lg = dpo_loss(model, reference, &t[best], &t[worst], o.beta, sub)?;
            Ok(StepLoss {
                policy: lg.loss,
                cpgo: 0.0,
                eligible: 0,
                total: lg,
            })
        }
    }
}

fn member_estimates(g: &RolloutGroup) -> Vec<Vec<f64>> {
    g.trajectories
        .iter()
        .map(|t| {
            if t.is_complete() {
                t.last().to_vec()
            } else {
                t.coarse_pred.clone().unwrap_or_else(|| t.last().to_vec())
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: VelocityModel,
    pub records: Vec<MetricsRecord>,
    pub selections: Vec<SelectionRecord>,
    pub initial_eval: EvalStats,
    pub final_eval: EvalStats,
    pub eval_trajectories: Vec<Trajectory>,
}

/// Runs the configured fine-tuning method from `pretrained`. Bit-reproducible
/// for a fixed configuration.
pub fn finetune(cfg: &ExperimentConfig, pretrained: &VelocityModel) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if pretrained.arch() != &cfg.arch() {
        return Err(Error::Config("pretrained checkpoint does not match the configured model".into()));
    }
    let grid = cfg.time_grid()?;
    let sched = NoiseSchedule::constant(cfg.rollout.eta, &grid);
    let reward = cfg.reward_spec();
    let gsched = GranularitySchedule::from_ratio(cfg.schedule.period, cfg.schedule.coarse_ratio)?;
    let reference = pretrained.clone();
    let mut model = pretrained.clone();
    let mut opt = Adam::new(cfg.finetune_optimizer(), model.num_params());
    let (initial_eval, _) = evaluate_policy(&model, cfg, &grid, &reward)?;
    let n_cond = cfg.data.n_modes;
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.optimizer.iterations);
    let mut selections = Vec::new();
    let mut last_eval = (initial_eval.clone(), Vec::new());

    for iter in 0..cfg.optimizer.iterations {
        let old = model.clone();
        let gran = granularity_for(cfg, &gsched, iter);
        let plan = plan_for(cfg, gran);
        let mut groups = Vec::with_capacity(n_cond);
        for c in 0..n_cond {
            let g = collect_groups(&old, cfg, &grid, &sched, &reward, iter, c, gran, plan)
                .map_err(|e| Error::Iteration { iter, cond: c, source: Box::new(e) })?;
            if let Some(s) = &g.selection {
                selections.push(s.clone());
            }
            groups.push(g);
        }

        let mut losses = Losses { grpo: 0.0, cpgo: 0.0, total: 0.0 };
        let mut eligible = 0;
        for inner in 0..cfg.optimizer.inner_steps {
            let mut total = LossGrad::zeros(model.num_params());
            losses = Losses { grpo: 0.0, cpgo: 0.0, total: 0.0 };
            eligible = 0;
            for (c, g) in groups.iter().enumerate() {
                let key = NoiseKey::new(Stream::Timesteps, cfg.seed)
                    .iter(iter as u64)
                    .cond(c as u64)
                    .step(inner as u64);
                let sub = Subsample::new(cfg.objectives.timestep_fraction, key);
                let l = condition_loss(&model, &old, &reference, cfg, g, plan, &sub)
                    .map_err(|e| Error::Iteration { iter, cond: c, source: Box::new(e) })?;
                let w = 1.0 / n_cond as f64;
                total.add_scaled(&l.total, w);
                losses.grpo += w * l.policy;
                losses.cpgo += w * l.cpgo;
                eligible += l.eligible;
            }
            losses.total = total.loss;
            if !total.loss.is_finite() || total.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { step: iter, loss: total.loss });
            }
            opt.step(model.params_mut(), &total.grad);
        }

        let mut rewards = Vec::new();
        let mut stds = Vec::new();
        let mut divs = Vec::new();
        for g in &groups {
            for grp in std::iter::once(&g.g1).chain(g.g2.as_ref()) {
                rewards.extend_from_slice(grp.rewards());
                stds.push(grp.advantages.std);
            }
            let mut est = member_estimates(&g.g1);
            if let Some(g2) = &g.g2 {
                est.extend(member_estimates(g2));
            }
            divs.push(group_diversity(&est)?);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        last_eval = evaluate_policy(&model, cfg, &grid, &reward)?;
        records.push(MetricsRecord {
            iter,
            mean_reward: mean(&rewards),
            reward_std: mean(&stds),
            diversity: mean(&divs),
            latent_consistency: last_eval.0.latent_consistency,
            eval_reward: last_eval.0.mean_reward,
            granularity: gran,
            losses,
            cpgo_eligible: eligible,
            wall_time: cfg.output.log_wall_time.then(|| start.elapsed().as_secs_f64()),
        });
    }
    let (final_eval, eval_trajectories) = if cfg.optimizer.iterations == 0 {
        evaluate_policy(&model, cfg, &grid, &reward)?
    } else {
        last_eval
    };
    Ok(FinetuneOutcome {
        model,
        records,
        selections,
        initial_eval,
        final_eval,
        eval_trajectories,
    })
}

/// Output files written by [`run_finetune`] inside the run directory.
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "finetuned.ckpt";
pub const SELECTIONS_FILE: &str = "selections.jsonl";
pub const TRAJECTORY_FILE: &str = "eval_trajectories.jsonl";
pub const SAMPLES_IMAGE: &str = "samples.pgm";

/// Loads the pretrained checkpoint, fine-tunes, and writes the metrics stream,
/// final checkpoint, selection log, evaluation trajectories and a raster of
/// the evaluation samples into `cfg.output.dir`.
pub fn run_finetune(cfg: &ExperimentConfig) -> Result<FinetuneOutcome> {
    let pretrained = super::load_pretrained(cfg)?;
    let out = finetune(cfg, &pretrained)?;
    write_outputs(cfg, &out, &cfg.output.dir)?;
    Ok(out)
}

fn write_outputs(cfg: &ExperimentConfig, out: &FinetuneOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let create = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
        Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
    };
    let mut w = create(METRICS_FILE)?;
    write_metrics(&mut w, &out.records)?;
    std::io::Write::flush(&mut w)?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &out.model, cfg.seed)?;
    let mut w = create(SELECTIONS_FILE)?;
    for s in &out.selections {
        serde_json::to_writer(&mut w, s)?;
        std::io::Write::write_all(&mut w, b"\n")?;
    }
    std::io::Write::flush(&mut w)?;
    let mut w = create(TRAJECTORY_FILE)?;
    write_trajectories(&mut w, &out.eval_trajectories)?;
    std::io::Write::flush(&mut w)?;
    let samples: Vec<Vec<f64>> = out.eval_trajectories.iter().map(|t| t.last().to_vec()).collect();
    if !samples.is_empty() {
        let half = cfg.data.radius + 4.0 * cfg.data.std + 1.0;
        let img = rasterize_samples(
            &samples,
            &Bounds::square(half),
            cfg.eval.raster_resolution,
            cfg.eval.raster_bandwidth,
        )?;
        img.save(dir.join(SAMPLES_IMAGE))?;
    }
    Ok(())
}
