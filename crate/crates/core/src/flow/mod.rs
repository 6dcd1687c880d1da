//! Flow-matching model, pretraining objective and deterministic sampling.

pub mod checkpoint;
pub mod data;
pub mod grid;
pub mod model;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::accum::{accumulate, LossGrad};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{NoiseKey, Stream};
use crate::trajectory::{Trajectory, Transition};
use crate::{Error, Result};
pub use data::GaussianMixture;
pub use grid::TimeGrid;
pub use model::{Activation, Arch, Tape, VelocityModel};

/// (1−t)·x0 + t·x1.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

/// Regression target of the straight path: x1 − x0.
pub fn target_velocity(x0: &[f64], x1: &[f64]) -> Vec<f64> {
    x0.iter().zip(x1).map(|(a, b)| b - a).collect()
}

/// x − t·v_θ(x, t, c): one Euler step straight to t = 0.
pub fn single_step_predict(model: &VelocityModel, x: &[f64], t: f64, cond: usize) -> Vec<f64> {
    if t == 0.0 {
        return x.to_vec();
    }
    let v = model.forward(x, t, cond);
    predict_from_velocity(x, &v, t)
}

/// Same prediction when the velocity is already known.
pub fn predict_from_velocity(x: &[f64], v: &[f64], t: f64) -> Vec<f64> {
    x.iter().zip(v).map(|(xi, vi)| xi - t * vi).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainBatch {
    pub x0: Vec<Vec<f64>>,
    pub x1: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    pub cond: Vec<usize>,
}

impl PretrainBatch {
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    /// Data from the mixture, standard-normal noise, uniform times.
    pub fn sample(data: &GaussianMixture, size: usize, rng: &mut impl Rng) -> Self {
        let mut b = PretrainBatch {
            x0: Vec::with_capacity(size),
            x1: Vec::with_capacity(size),
            t: Vec::with_capacity(size),
            cond: Vec::with_capacity(size),
        };
        for _ in 0..size {
            let (c, x0) = data.sample_pair(rng);
            let x1: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
            b.t.push(rng.random::<f64>());
            b.x0.push(x0);
            b.x1.push(x1);
            b.cond.push(c);
        }
        b
    }
}

/// Mean of ‖v_θ(x_t, t, c) − (x1 − x0)‖² over the batch.
pub fn fm_loss(model: &VelocityModel, batch: &PretrainBatch) -> Result<LossGrad> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if batch.x1.len() != n || batch.t.len() != n || batch.cond.len() != n {
        return Err(Error::InvalidArgument("batch fields have unequal lengths".into()));
    }
    for &c in &batch.cond {
        model.check_condition(c)?;
    }
    let inv_n = 1.0 / n as f64;
    let out = accumulate(n, model.num_params(), |i, grad| {
        let xt = interpolate(&batch.x0[i], &batch.x1[i], batch.t[i]);
        let target = target_velocity(&batch.x0[i], &batch.x1[i]);
        let mut sq = 0.0;
        model.vjp_with(&xt, batch.t[i], batch.cond[i], grad, |v| {
            v.iter()
                .zip(&target)
                .map(|(vi, ti)| {
                    let r = vi - ti;
                    sq += r * r;
                    2.0 * r * inv_n
                })
                .collect()
        });
        sq * inv_n
    });
    Ok(out)
}

/// Euler ODE solve from t = 1 to t = 0: x ← x + (t_next − t)·v_θ(x, t, c).
pub fn ode_sample(model: &VelocityModel, x1: &[f64], grid: &TimeGrid, cond: usize) -> Result<Trajectory> {
    model.check_condition(cond)?;
    let mut traj = Trajectory::new(cond, grid.knots().to_vec(), x1.to_vec());
    for n in (1..=grid.steps()).rev() {
        let (t_from, t_to) = (grid.t(n), grid.t(n - 1));
        let x = traj.last();
        let v = model.forward(x, t_from, cond);
        let next: Vec<f64> = x.iter().zip(&v).map(|(xi, vi)| xi + (t_to - t_from) * vi).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "ode_sample",
                step: grid.steps() - n,
            });
        }
        traj.push(
            Transition {
                from_knot: n,
                t_from,
                t_to,
                velocity: v,
                mean: next.clone(),
                variance: 0.0,
                noise: None,
                key: None,
            },
            next,
        );
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 256,
            optimizer: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

/// Per-step training losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<(usize, f64)>,
}

impl LossHistory {
    /// Writes `step,loss` lines.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (s, l) in &self.records {
            writeln!(w, "{s},{l}")?;
        }
        Ok(())
    }

    /// Mean loss over a trailing window, used to compare training phases.
    pub fn window_mean(&self, from: usize, to: usize) -> f64 {
        let sl = &self.records[from..to];
        sl.iter().map(|r| r.1).sum::<f64>() / sl.len() as f64
    }
}

/// Minimizes the flow-matching loss with Adam; bit-reproducible from the seed.
pub fn pretrain(
    mut model: VelocityModel,
    data: &GaussianMixture,
    cfg: &PretrainConfig,
) -> Result<(VelocityModel, LossHistory)> {
    if data.n_modes() == 0 || cfg.batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    if data.n_modes() > model.n_conditions() || data.dim() != model.data_dim() {
        return Err(Error::InvalidArgument(
            "dataset does not match model conditions/dimension".into(),
        ));
    }
    let mut opt = Adam::new(cfg.optimizer.clone(), model.num_params());
    let mut history = LossHistory::default();
    for step in 0..cfg.steps {
        let mut rng = NoiseKey::new(Stream::Pretrain, cfg.seed).step(step as u64).rng();
        let batch = PretrainBatch::sample(data, cfg.batch_size, &mut rng);
        let lg = fm_loss(&model, &batch)?;
        if !lg.loss.is_finite() || lg.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss: lg.loss });
        }
        history.records.push((step, lg.loss));
        opt.step(model.params_mut(), &lg.grad);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolate_examples() {
        assert_eq!(interpolate(&[0.0, 0.0], &[2.0, 2.0], 0.5), vec![1.0, 1.0]);
        assert_eq!(interpolate(&[3.0, -1.0], &[5.0, 5.0], 0.0), vec![3.0, -1.0]);
        assert_eq!(interpolate(&[3.0, -1.0], &[5.0, 5.0], 1.0), vec![5.0, 5.0]);
        assert_eq!(target_velocity(&[3.0, -1.0], &[5.0, 5.0]), vec![2.0, 6.0]);
    }

    #[test]
    fn single_step_prediction_examples() {
        assert_eq!(predict_from_velocity(&[1.0, 1.0], &[2.0, 0.0], 0.5), vec![0.0, 1.0]);
        let m = VelocityModel::new(Arch::tiny(), 1);
        assert_eq!(single_step_predict(&m, &[0.4, -7.0], 0.0, 3), vec![0.4, -7.0]);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let m = VelocityModel::new(Arch::tiny(), 1);
        let b = PretrainBatch {
            x0: vec![],
            x1: vec![],
            t: vec![],
            cond: vec![],
        };
        assert!(matches!(fm_loss(&m, &b), Err(Error::EmptyBatch)));
    }

    #[test]
    fn zero_model_single_pair_loss_is_two() {
        let arch = Arch::tiny();
        let m = VelocityModel::from_params(arch.clone(), vec![0.0; arch.param_count()]).unwrap();
        let b = PretrainBatch {
            x0: vec![vec![0.0, 0.0]],
            x1: vec![vec![1.0, 1.0]],
            t: vec![0.3],
            cond: vec![0],
        };
        assert_eq!(fm_loss(&m, &b).unwrap().loss, 2.0);
    }

    #[test]
    fn ode_one_step_grid() {
        let m = VelocityModel::new(Arch::tiny(), 5);
        let g = TimeGrid::uniform(1).unwrap();
        let x1 = [0.5, -0.5];
        let tr = ode_sample(&m, &x1, &g, 2).unwrap();
        let v = m.forward(&x1, 1.0, 2);
        assert_eq!(tr.last(), &[x1[0] - v[0], x1[1] - v[1]]);
        assert!(tr.is_complete());
    }
}
