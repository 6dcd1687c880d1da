use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::trajectory::read_trajectories;
use crate::vh::{evaluate_image, latent_consistency, GrayImage, VhParams, VhReport};
use crate::{Error, Result};

pub const VH_REPORT_FILE: &str = "vh_report.jsonl";

/// Result for one input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputRecord {
    Image {
        path: String,
        report: VhReport,
    },
    Trajectories {
        path: String,
        count: usize,
        latent_consistency: f64,
    },
    Error {
        path: String,
        error: String,
    },
}

/// Means over the inputs that evaluated successfully.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VhSummary {
    pub images: usize,
    pub trajectory_files: usize,
    pub errors: usize,
    pub laplacian_variance: Option<f64>,
    pub high_freq_energy: Option<f64>,
    pub edge_artifact: Option<f64>,
    pub noise_level: Option<f64>,
    /// Mean over every trajectory in every dump.
    pub latent_consistency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalVhOutput {
    pub records: Vec<InputRecord>,
    pub summary: VhSummary,
}

impl EvalVhOutput {
    /// One record per line followed by the summary line tagged `"kind":"summary"`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        let mut summary = serde_json::to_value(&self.summary)?;
        if let serde_json::Value::Object(map) = &mut summary {
            map.insert("kind".into(), "summary".into());
        }
        s.push_str(&serde_json::to_string(&summary)?);
        s.push('\n');
        Ok(s)
    }
}

fn is_image(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn is_trajectory_dump(p: &Path) -> bool {
    p.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with("trajectories.jsonl"))
}

/// Directories contribute their `*.pgm` files and `*trajectories.jsonl`
/// dumps (not recursive), in name order.
fn expand(paths: &[PathBuf]) -> Vec<std::result::Result<PathBuf, (PathBuf, Error)>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            match std::fs::read_dir(p) {
                Ok(rd) => {
                    let mut entries: Vec<PathBuf> = rd
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|q| q.is_file() && (is_image(q) || is_trajectory_dump(q)))
                        .collect();
                    entries.sort();
                    out.extend(entries.into_iter().map(Ok));
                }
                Err(e) => out.push(Err((p.clone(), e.into()))),
            }
        } else {
            out.push(Ok(p.clone()));
        }
    }
    out
}

fn evaluate_path(p: &Path, params: &VhParams) -> Result<InputRecord> {
    let path = p.display().to_string();
    if is_image(p) {
        let img = GrayImage::load(p)?;
        return Ok(InputRecord::Image {
            path,
            report: evaluate_image(&img, params)?,
        });
    }
    let f = std::fs::File::open(p)?;
    let trajs = read_trajectories(std::io::BufReader::new(f))?;
    if trajs.is_empty() {
        return Err(Error::Format("trajectory dump holds no trajectories".into()));
    }
    let total = trajs
        .iter()
        .map(latent_consistency)
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum::<f64>();
    Ok(InputRecord::Trajectories {
        path,
        count: trajs.len(),
        latent_consistency: total / trajs.len() as f64,
    })
}

/// Evaluates images (`*.pgm`) and trajectory dumps. An input that cannot be
/// read or evaluated yields an error record and the batch continues.
pub fn run_eval_vh(paths: &[PathBuf], params: &VhParams) -> Result<EvalVhOutput> {
    let records: Vec<InputRecord> = expand(paths)
        .into_iter()
        .map(|item| match item {
            Ok(p) => evaluate_path(&p, params).unwrap_or_else(|e| InputRecord::Error {
                path: p.display().to_string(),
                error: e.to_string(),
            }),
            Err((p, e)) => InputRecord::Error {
                path: p.display().to_string(),
                error: e.to_string(),
            },
        })
        .collect();
    let reports: Vec<&VhReport> = records
        .iter()
        .filter_map(|r| match r {
            InputRecord::Image { report, .. } => Some(report),
            _ => None,
        })
        .collect();
    let mean = |f: fn(&VhReport) -> f64| {
        (!reports.is_empty()).then(|| reports.iter().map(|r| f(r)).sum::<f64>() / reports.len() as f64)
    };
    let (mut lc_sum, mut lc_n, mut dumps, mut errors) = (0.0, 0usize, 0, 0);
    for r in &records {
        match r {
            InputRecord::Trajectories {
                count,
                latent_consistency,
                ..
            } => {
                lc_sum += latent_consistency * *count as f64;
                lc_n += count;
                dumps += 1;
            }
            InputRecord::Error { .. } => errors += 1,
            InputRecord::Image { .. } => {}
        }
    }
    let summary = VhSummary {
        images: reports.len(),
        trajectory_files: dumps,
        errors,
        laplacian_variance: mean(|r| r.laplacian_variance),
        high_freq_energy: mean(|r| r.high_freq_energy),
        edge_artifact: mean(|r| r.edge_artifact),
        noise_level: mean(|r| r.noise_level),
        latent_consistency: (lc_n > 0).then(|| lc_sum / lc_n as f64),
    };
    Ok(EvalVhOutput { records, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_images_and_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        for (i, v) in [0.0, 80.0, 255.0].iter().enumerate() {
            GrayImage::constant(16, 16, *v).save(dir.path().join(format!("c{i}.pgm"))).unwrap();
        }
        std::fs::write(dir.path().join("broken.pgm"), b"P2\n1 1\n255\n0").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let out = run_eval_vh(&[dir.path().to_path_buf()], &VhParams::default()).unwrap();
        assert_eq!(out.records.len(), 4);
        assert_eq!(out.summary.images, 3);
        assert_eq!(out.summary.errors, 1);
        assert!(matches!(out.records[0], InputRecord::Error { .. }));
        for r in &out.records[1..] {
            let InputRecord::Image { report, .. } = r else { panic!("expected image") };
            assert_eq!(report.laplacian_variance, 0.0);
            assert_eq!(report.high_freq_energy, 0.0);
            assert_eq!(report.edge_artifact, 0.0);
            assert_eq!(report.noise_level, 0.0);
        }
        assert_eq!(out.summary.noise_level, Some(0.0));
        let again = run_eval_vh(&[dir.path().to_path_buf()], &VhParams::default()).unwrap();
        assert_eq!(out.to_jsonl().unwrap(), again.to_jsonl().unwrap());
    }

    #[test]
    fn missing_path_is_an_error_record() {
        let out = run_eval_vh(&[PathBuf::from("/nonexistent/x.pgm")], &VhParams::default()).unwrap();
        assert_eq!(out.summary.errors, 1);
        assert_eq!(out.summary.laplacian_variance, None);
        assert!(out.to_jsonl().unwrap().contains("\"kind\":\"summary\""));
    }
}
