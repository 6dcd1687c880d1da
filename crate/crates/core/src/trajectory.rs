//! Recorded sampling paths.
//!
//! A trajectory stores states from the noise end toward the clean end. State
//! `i` sits on grid knot `start_knot - i`; transition `i` maps state `i` to
//! state `i + 1`.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::rng::NoiseKey;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Knot index of the source state.
    pub from_knot: usize,
    pub t_from: f64,
    pub t_to: f64,
    /// Velocity of the rollout policy at the source state.
    pub velocity: Vec<f64>,
    /// Deterministic part of the step (the Gaussian mean).
    pub mean: Vec<f64>,
    /// ε²Δt; zero for deterministic steps.
    pub variance: f64,
    /// Standard-normal draw scaled into the step, if stochastic.
    pub noise: Option<Vec<f64>>,
    pub key: Option<NoiseKey>,
}

impl Transition {
    pub fn dt(&self) -> f64 {
        self.t_from - self.t_to
    }

    pub fn is_stochastic(&self) -> bool {
        self.variance > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub cond: usize,
    /// Ascending grid knots the trajectory was sampled on.
    pub knots: Vec<f64>,
    pub start_knot: usize,
    pub states: Vec<Vec<f64>>,
    pub transitions: Vec<Transition>,
    /// Rollout-policy velocity at the last state of a partial trajectory.
    pub tail_velocity: Option<Vec<f64>>,
    /// Cached single-step clean-sample prediction at the last state.
    pub coarse_pred: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(cond: usize, knots: Vec<f64>, x_start: Vec<f64>) -> Self {
        let start_knot = knots.len() - 1;
        Self {
            cond,
            knots,
            start_knot,
            states: vec![x_start],
            transitions: Vec::new(),
            tail_velocity: None,
            coarse_pred: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn initial(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory has a start state")
    }

    /// Knot index of the most recent state.
    pub fn current_knot(&self) -> usize {
        self.start_knot + 1 - self.states.len()
    }

    pub fn current_t(&self) -> f64 {
        self.knots[self.current_knot()]
    }

    pub fn is_complete(&self) -> bool {
        self.current_knot() == 0
    }

    /// State at grid knot `n`, if the trajectory has visited it.
    pub fn state_at_knot(&self, n: usize) -> Option<&[f64]> {
        if n > self.start_knot || n < self.current_knot() {
            return None;
        }
        Some(&self.states[self.start_knot - n])
    }

    /// Clean endpoint of a complete trajectory.
    pub fn endpoint(&self) -> Result<&[f64]> {
        if self.is_complete() {
            Ok(self.last())
        } else {
            Err(Error::IncompleteTrajectory)
        }
    }

    /// Rollout-policy velocity recorded at visited knot `n`.
    pub fn velocity_at_knot(&self, n: usize) -> Option<&[f64]> {
        if n == self.current_knot() {
            return self.tail_velocity.as_deref();
        }
        let i = self.start_knot.checked_sub(n)?;
        self.transitions.get(i).map(|tr| tr.velocity.as_slice())
    }

    pub(crate) fn push(&mut self, tr: Transition, next: Vec<f64>) {
        self.tail_velocity = None;
        self.coarse_pred = None;
        self.transitions.push(tr);
        self.states.push(next);
    }
}

const DUMP_FORMAT: &str = "flowrft-trajectories";
const DUMP_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    format: String,
    version: u32,
    count: usize,
}

/// Writes trajectories as line-delimited JSON: a header line
/// `{"format":"flowrft-trajectories","version":1,"count":N}` followed by one
/// trajectory object per line. Floats use shortest round-trip formatting.
pub fn write_trajectories<W: Write>(mut w: W, trajs: &[Trajectory]) -> Result<()> {
    let header = DumpHeader {
        format: DUMP_FORMAT.into(),
        version: DUMP_VERSION,
        count: trajs.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for t in trajs {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trajectories<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("empty trajectory dump".into()))??;
    let header: DumpHeader = serde_json::from_str(&first)?;
    if header.format != DUMP_FORMAT || header.version != DUMP_VERSION {
        return Err(Error::Format(format!(
            "unsupported trajectory dump {} v{}",
            header.format, header.version
        )));
    }
    let mut out = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    if out.len() != header.count {
        return Err(Error::Format(format!(
            "header announces {} trajectories, found {}",
            header.count,
            out.len()
        )));
    }
    Ok(out)
}
