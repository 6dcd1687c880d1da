use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Ascending time knots `0 = t[0] < … < t[T] = 1`; sampling walks them from
/// the top down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    shift: f64,
    knots: Vec<f64>,
}

impl TimeGrid {
    /// Shifted grid `t_n = s·u / (1 + (s−1)·u)` with `u = n/T`.
    pub fn shifted(steps: usize, shift: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        if !(shift > 0.0 && shift.is_finite()) {
            return Err(Error::InvalidArgument(format!("shift must be positive, got {shift}")));
        }
        let mut knots: Vec<f64> = (0..=steps)
            .map(|n| {
                let u = n as f64 / steps as f64;
                shift * u / (1.0 + (shift - 1.0) * u)
            })
            .collect();
        knots[0] = 0.0;
        knots[steps] = 1.0;
        Ok(Self { shift, knots })
    }

    pub fn uniform(steps: usize) -> Result<Self> {
        Self::shifted(steps, 1.0)
    }

    /// Builds a grid from explicit knots (must be strictly increasing from 0 to 1).
    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots[0] != 0.0 || *knots.last().unwrap() != 1.0 {
            return Err(Error::InvalidArgument("knots must run from 0 to 1".into()));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("knots must be strictly increasing".into()));
        }
        Ok(Self { shift: f64::NAN, knots })
    }

    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn t(&self, n: usize) -> f64 {
        self.knots[n]
    }

    /// Δt_n = t[n] − t[n−1].
    pub fn dt(&self, n: usize) -> f64 {
        self.knots[n] - self.knots[n - 1]
    }

    /// Smallest knot above zero; the score term is undefined at or below it.
    pub fn t_floor(&self) -> f64 {
        self.knots[1]
    }

    pub fn max_dt(&self) -> f64 {
        (1..self.knots.len()).map(|n| self.dt(n)).fold(0.0, f64::max)
    }
}
