//! Experiment orchestration: configuration, pretraining, fine-tuning runs,
//! the verification suite, diagnostics and image evaluation.

pub mod config;
mod diagnostics;
mod eval_vh;
mod finetune;
pub mod records;
mod verify;

pub use config::{ExperimentConfig, Method, SCHEMA_VERSION};
pub use diagnostics::{
    correlation_sweep, diversity_study, run_diagnostics, CorrelationRow, DiagnosticsReport, DiversityRow,
    CORRELATION_FILE, DIAGNOSTICS_SUMMARY_FILE, DIVERSITY_FILE,
};
pub use eval_vh::{run_eval_vh, EvalVhOutput, InputRecord, VhSummary, VH_REPORT_FILE};
pub use finetune::{
    evaluate_policy, finetune, run_finetune, EvalStats, FinetuneOutcome, CHECKPOINT_FILE, METRICS_FILE,
    SAMPLES_IMAGE, SELECTIONS_FILE, TRAJECTORY_FILE,
};
pub use records::{read_metrics, write_metrics, Losses, MetricsRecord};
pub use verify::{
    gradient_check, gradient_checks, max_relative_error, run_verify, scaling_probes, vh_oracle_check,
    GradientFixture, VerifyOutput,
};

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::flow::{checkpoint, ode_sample, pretrain, LossHistory, PretrainConfig, VelocityModel};
use crate::optim::AdamConfig;
use crate::rewards::energy_distance;
use crate::rng::{NoiseKey, Stream};
use crate::{Error, Result};

pub const PRETRAIN_LOSS_FILE: &str = "pretrain_loss.csv";
pub const PRETRAIN_SUMMARY_FILE: &str = "pretrain_summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub final_loss_mean: f64,
    /// Energy distance between model samples and fresh data.
    pub energy_distance: f64,
    /// Energy distance between two independent data draws of the same size.
    pub reference_energy_distance: f64,
}

/// Pretrains a velocity model on the configured mixture.
pub fn pretrain_model(cfg: &ExperimentConfig) -> Result<(VelocityModel, LossHistory)> {
    cfg.validate()?;
    let model = VelocityModel::new(cfg.arch(), NoiseKey::new(Stream::ModelInit, cfg.seed).digest());
    let pc = PretrainConfig {
        steps: cfg.pretrain.steps,
        batch_size: cfg.pretrain.batch_size,
        optimizer: AdamConfig {
            lr: cfg.pretrain.lr,
            ..AdamConfig::default()
        },
        seed: cfg.seed,
    };
    pretrain(model, &cfg.mixture(), &pc)
}

/// Sample quality of a pretrained model against the data distribution.
pub fn pretrain_quality(model: &VelocityModel, cfg: &ExperimentConfig, n: usize) -> Result<(f64, f64)> {
    let grid = cfg.time_grid()?;
    let data = cfg.mixture();
    let key = NoiseKey::new(Stream::Eval, cfg.seed).iter(u64::MAX);
    let mut samples = Vec::with_capacity(n);
    let mut fresh = Vec::with_capacity(n);
    let mut fresh2 = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % data.n_modes();
        let x1 = key.traj(i as u64).normal_vec(model.data_dim());
        samples.push(ode_sample(model, &x1, &grid, c)?.last().to_vec());
        let mut rng = key.step(1).traj(i as u64).rng();
        fresh.push(data.sample(c, &mut rng));
        fresh2.push(data.sample(c, &mut rng));
    }
    Ok((energy_distance(&samples, &fresh), energy_distance(&fresh2, &fresh)))
}

/// Loads the checkpoint named by `output.pretrained`; a missing file is a
/// configuration error.
pub fn load_pretrained(cfg: &ExperimentConfig) -> Result<VelocityModel> {
    let path = cfg.pretrained_path();
    let (model, _) = checkpoint::load(&path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("pretrained checkpoint {}: {io}", path.display())),
        other => other,
    })?;
    if model.arch() != &cfg.arch() {
        return Err(Error::Config(format!(
            "checkpoint {} does not match the configured model architecture",
            path.display()
        )));
    }
    Ok(model)
}

/// Pretrains and writes the checkpoint, loss curve and a quality summary.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<(VelocityModel, PretrainSummary)> {
    let (model, history) = pretrain_model(cfg)?;
    let (ed, reference) = pretrain_quality(&model, cfg, 1024)?;
    let tail = history.records.len().min(100);
    let n = history.records.len();
    let summary = PretrainSummary {
        steps: n,
        final_loss_mean: if tail > 0 { history.window_mean(n - tail, n) } else { f64::NAN },
        energy_distance: ed,
        reference_energy_distance: reference,
    };
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir)?;
    checkpoint::save(&cfg.pretrained_path(), &model, cfg.seed)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(PRETRAIN_LOSS_FILE))?);
    writeln!(w, "step,loss")?;
    history.write(&mut w)?;
    w.flush()?;
    std::fs::write(dir.join(PRETRAIN_SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok((model, summary))
}
