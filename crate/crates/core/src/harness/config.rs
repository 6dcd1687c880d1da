use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::cpgo::CpgoConfig;
use crate::flow::{Activation, Arch, GaussianMixture, TimeGrid};
use crate::objectives::{ClipConfig, DdpoAggregation};
use crate::optim::AdamConfig;
use crate::rewards::{RewardKind, RewardSpec};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Shared-noise groups, full rollouts, no consistency term.
    Grpo,
    /// Always fine-grained groups.
    Fine,
    /// Always coarse-grained groups.
    Coarse,
    /// Granularity schedule, intra-group selection and the consistency term.
    ConsistentRft,
    Dpo,
    Ddpo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Grpo => "grpo",
            Method::Fine => "fine",
            Method::Coarse => "coarse",
            Method::ConsistentRft => "consistent_rft",
            Method::Dpo => "dpo",
            Method::Ddpo => "ddpo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub cond_dim: usize,
    pub time_freqs: usize,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Arch::default();
        Self {
            hidden: a.hidden,
            cond_dim: a.cond_dim,
            time_freqs: a.time_freqs,
            activation: a.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_modes: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_modes: 8,
            radius: 4.0,
            std: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 256,
            lr: 2e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub steps: usize,
    pub shift: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { steps: 16, shift: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub group_size: usize,
    pub eta: f64,
    /// Knot index, counted from the clean end, at which members are perceived.
    pub perception_knot: usize,
    pub k1: usize,
    /// Apply intra-group selection (perception, clustering, refinement).
    pub intra_group: bool,
    /// Restrict intra-group selection to fine-grained iterations.
    pub intra_group_fine_only: bool,
    pub kmeans_iters: usize,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            group_size: 12,
            eta: 0.3,
            perception_knot: 12,
            k1: 6,
            intra_group: true,
            intra_group_fine_only: false,
            kmeans_iters: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub period: usize,
    pub coarse_ratio: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            period: 40,
            coarse_ratio: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectivesSection {
    pub clip_epsilon: f64,
    pub adv_clip: f64,
    pub adv_guard: f64,
    pub timestep_fraction: f64,
    pub beta: f64,
    pub ddpo_aggregation: DdpoAggregation,
}

impl Default for ObjectivesSection {
    fn default() -> Self {
        Self {
            clip_epsilon: 1e-4,
            adv_clip: 5.0,
            adv_guard: 1e-8,
            timestep_fraction: 0.6,
            beta: 1.0,
            ddpo_aggregation: DdpoAggregation::Group,
        }
    }
}

impl ObjectivesSection {
    pub fn clip(&self) -> ClipConfig {
        ClipConfig {
            epsilon: self.clip_epsilon,
            adv_clip: self.adv_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub iterations: usize,
    /// Optimizer steps per iteration on the same rollouts.
    pub inner_steps: usize,
    /// Kept for parity with large-scale setups; only 1 is supported.
    pub grad_accum: usize,
    pub max_grad_norm: Option<f64>,
    pub weight_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            iterations: 200,
            inner_steps: 1,
            grad_accum: 1,
            max_grad_norm: Some(1.0),
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Fixed initial noises per condition for the evaluation pass.
    pub samples_per_cond: usize,
    pub raster_resolution: usize,
    pub raster_bandwidth: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            samples_per_cond: 32,
            raster_resolution: 64,
            raster_bandwidth: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub seeds: usize,
    pub correlation_seeds: usize,
    /// Knots (from the clean end) probed for perception correlation, noise end first.
    pub probe_knots: Vec<usize>,
    pub scaling_steps: Vec<usize>,
    pub scaling_probes: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            seeds: 100,
            correlation_seeds: 50,
            probe_knots: vec![16, 12, 8, 4, 2],
            scaling_steps: vec![16, 32, 64, 128],
            scaling_probes: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Pretrained checkpoint; relative paths resolve against `dir`.
    pub pretrained: PathBuf,
    /// Include wall-clock seconds in metrics records (breaks byte-identity across runs).
    pub log_wall_time: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            pretrained: PathBuf::from("pretrained.ckpt"),
            log_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub objectives: ObjectivesSection,
    #[serde(default)]
    pub cpgo: CpgoConfig,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default = "default_reward")]
    pub reward: RewardKind,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_method() -> Method {
    Method::ConsistentRft
}

fn default_reward() -> RewardKind {
    RewardKind::TargetDistance
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            method: default_method(),
            model: ModelSection::default(),
            data: DataSection::default(),
            pretrain: PretrainSection::default(),
            grid: GridSection::default(),
            rollout: RolloutSection::default(),
            schedule: ScheduleSection::default(),
            objectives: ObjectivesSection::default(),
            cpgo: CpgoConfig::default(),
            optimizer: OptimizerSection::default(),
            reward: default_reward(),
            eval: EvalSection::default(),
            diagnostics: DiagnosticsSection::default(),
            output: OutputSection::default(),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| bad(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    pub fn arch(&self) -> Arch {
        Arch {
            data_dim: 2,
            n_conditions: self.data.n_modes,
            cond_dim: self.model.cond_dim,
            time_freqs: self.model.time_freqs,
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
        }
    }

    pub fn mixture(&self) -> GaussianMixture {
        GaussianMixture::ring(self.data.n_modes, self.data.radius, self.data.std)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::shifted(self.grid.steps, self.grid.shift)
    }

    pub fn reward_spec(&self) -> RewardSpec {
        RewardSpec::for_mixture(self.reward.clone(), &self.mixture())
    }

    pub fn finetune_optimizer(&self) -> AdamConfig {
        AdamConfig {
            lr: self.optimizer.lr,
            weight_decay: self.optimizer.weight_decay,
            max_grad_norm: self.optimizer.max_grad_norm,
            ..AdamConfig::default()
        }
    }

    pub fn pretrained_path(&self) -> PathBuf {
        if self.output.pretrained.is_absolute() {
            self.output.pretrained.clone()
        } else {
            self.output.dir.join(&self.output.pretrained)
        }
    }

    /// Checks every field against the preconditions of the stages that use it.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(bad("model.hidden needs at least one non-empty layer"));
        }
        if self.data.n_modes == 0 || !(self.data.std > 0.0) || !self.data.radius.is_finite() {
            return Err(bad("data needs n_modes >= 1, std > 0 and a finite radius"));
        }
        if self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) {
            return Err(bad("pretrain needs batch_size >= 1 and lr > 0"));
        }
        self.time_grid()?;
        let r = &self.rollout;
        if r.group_size < 2 {
            return Err(bad(format!("rollout.group_size must be >= 2, got {}", r.group_size)));
        }
        if !(r.eta >= 0.0 && r.eta.is_finite()) {
            return Err(bad("rollout.eta must be finite and >= 0"));
        }
        if r.perception_knot > self.grid.steps {
            return Err(bad(format!(
                "rollout.perception_knot {} exceeds grid steps {}",
                r.perception_knot, self.grid.steps
            )));
        }
        if r.k1 == 0 || r.k1 > r.group_size {
            return Err(bad(format!("rollout.k1 must lie in 1..=group_size, got {}", r.k1)));
        }
        if r.k1 < 2 || (r.group_size - r.k1 != 0 && r.group_size - r.k1 < 2) {
            return Err(bad("both selected groups need at least two members (or the second none)"));
        }
        crate::dgr::GranularitySchedule::from_ratio(self.schedule.period, self.schedule.coarse_ratio)
            .map_err(|e| bad(e.to_string()))?;
        let o = &self.objectives;
        if !(o.clip_epsilon > 0.0) || !(o.adv_clip > 0.0) || !(o.adv_guard > 0.0) {
            return Err(bad("objectives.clip_epsilon, adv_clip and adv_guard must be positive"));
        }
        if !(o.timestep_fraction > 0.0 && o.timestep_fraction <= 1.0) {
            return Err(bad("objectives.timestep_fraction must lie in (0, 1]"));
        }
        if !(o.beta > 0.0) {
            return Err(bad("objectives.beta must be positive"));
        }
        self.cpgo.validate().map_err(|e| bad(e.to_string()))?;
        let opt = &self.optimizer;
        if !(opt.lr >= 0.0) || opt.inner_steps == 0 {
            return Err(bad("optimizer needs lr >= 0 and inner_steps >= 1"));
        }
        if opt.grad_accum != 1 {
            return Err(bad("optimizer.grad_accum other than 1 is not supported"));
        }
        self.reward_spec().validate()?;
        if self.eval.samples_per_cond < 2 || self.eval.raster_resolution < 16 || !(self.eval.raster_bandwidth > 0.0) {
            return Err(bad("eval needs samples_per_cond >= 2, raster_resolution >= 16, bandwidth > 0"));
        }
        let d = &self.diagnostics;
        if d.probe_knots.iter().any(|&k| k > self.grid.steps) {
            return Err(bad("diagnostics.probe_knots must not exceed grid steps"));
        }
        if d.scaling_steps.len() < 2 || d.scaling_steps.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(bad("diagnostics.scaling_steps must double successively"));
        }
        Ok(())
    }
}
