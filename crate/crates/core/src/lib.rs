//! Reinforcement fine-tuning for conditional flow-matching samplers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accum;
pub mod cpgo;
pub mod dgr;
pub mod error;
pub mod flow;
pub mod group;
pub mod harness;
pub mod objectives;
pub mod optim;
pub mod report;
pub mod rewards;
pub mod rng;
pub mod sde;
pub mod trajectory;
pub mod vh;

pub use error::{Error, Result};

pub use flow::{Arch, TimeGrid, VelocityModel};
pub use group::{Granularity, RolloutGroup};
pub use harness::{ExperimentConfig, Method};
pub use report::{CheckLine, Report};
pub use rng::{NoiseKey, Stream};
pub use trajectory::Trajectory;
pub use vh::{GrayImage, VhParams, VhReport};
