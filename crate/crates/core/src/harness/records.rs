use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::group::Granularity;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    /// Policy-objective loss of the configured method (GRPO, DPO or DDPO).
    pub grpo: f64,
    /// Unweighted consistency loss.
    pub cpgo: f64,
    pub total: f64,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    /// Mean training reward over every group member (perception rewards for
    /// members that stopped early).
    pub mean_reward: f64,
    /// Mean within-group population std of the training rewards.
    pub reward_std: f64,
    /// Mean within-group sample diversity of the members' clean estimates.
    pub diversity: f64,
    /// Mean latent consistency of the evaluation trajectories after the update.
    pub latent_consistency: f64,
    /// Mean reward of the evaluation samples after the update.
    pub eval_reward: f64,
    pub granularity: Granularity,
    pub losses: Losses,
    pub cpgo_eligible: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

pub fn write_metrics<W: Write>(mut w: W, records: &[MetricsRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_metrics<R: BufRead>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip() {
        let rec = MetricsRecord {
            iter: 3,
            mean_reward: -0.25,
            reward_std: 0.1,
            diversity: 0.02,
            latent_consistency: 0.4,
            eval_reward: -0.3,
            granularity: Granularity::Coarse,
            losses: Losses { grpo: 0.0, cpgo: 1.5, total: 1.5e-6 },
            cpgo_eligible: 10,
            wall_time: None,
        };
        let mut buf = Vec::new();
        write_metrics(&mut buf, &[rec.clone(), rec.clone()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.contains("wall_time"));
        assert!(text.contains("\"granularity\":\"coarse\""));
        assert_eq!(read_metrics(&buf[..]).unwrap(), vec![rec.clone(), rec]);
    }
}
