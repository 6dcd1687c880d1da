use serde::{Deserialize, Serialize};

use crate::objectives::{group_advantages, AdvantageSet};
use crate::trajectory::Trajectory;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One shared initial noise; members differ only through step noise.
    Fine,
    /// Independent initial noises.
    Coarse,
}

/// Where a group's rewards were measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    Endpoint,
    Perception,
}

/// K trajectories for one condition with their rewards and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub granularity: Granularity,
    pub cond: usize,
    pub trajectories: Vec<Trajectory>,
    pub advantages: AdvantageSet,
    /// Knot range `(start, end)`: transitions leaving knots in `(end, start]` may be optimized.
    pub window: (usize, usize),
    pub reward_source: RewardSource,
}

impl RolloutGroup {
    pub fn new(
        granularity: Granularity,
        trajectories: Vec<Trajectory>,
        rewards: Vec<f64>,
        window: (usize, usize),
        reward_source: RewardSource,
        guard: f64,
        adv_clip: f64,
    ) -> Result<Self> {
        if trajectories.len() != rewards.len() {
            return Err(Error::InvalidArgument(format!(
                "{} trajectories but {} rewards",
                trajectories.len(),
                rewards.len()
            )));
        }
        let cond = trajectories.first().map(|t| t.cond).unwrap_or(0);
        let advantages = group_advantages(&rewards, guard, adv_clip)?;
        let g = Self {
            granularity,
            cond,
            trajectories,
            advantages,
            window,
            reward_source,
        };
        g.check_window()?;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn rewards(&self) -> &[f64] {
        &self.advantages.rewards
    }

    /// Every member must cover the whole window.
    pub fn check_window(&self) -> Result<()> {
        let (start, end) = self.window;
        if start < end {
            return Err(Error::Window(format!("window ({start}, {end}) is reversed")));
        }
        for (k, t) in self.trajectories.iter().enumerate() {
            if t.cond != self.cond {
                return Err(Error::InvalidArgument(format!("member {k} has a different condition")));
            }
            if t.start_knot < start || t.current_knot() > end {
                return Err(Error::Window(format!(
                    "member {k} spans knots {}..{} but window is {start}..{end}",
                    t.start_knot,
                    t.current_knot()
                )));
            }
        }
        Ok(())
    }

    /// Indices (into `transitions`) of stochastic steps inside the window, taken
    /// from the first member; all members share the grid.
    pub fn optimizable_steps(&self) -> Vec<usize> {
        let (start, end) = self.window;
        let Some(first) = self.trajectories.first() else {
            return Vec::new();
        };
        first
            .transitions
            .iter()
            .enumerate()
            .filter(|(_, tr)| tr.is_stochastic() && tr.from_knot <= start && tr.from_knot > end)
            .map(|(i, _)| i)
            .collect()
    }
}
