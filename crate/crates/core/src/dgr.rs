//! Dynamic granularity rollout.
//!
//! Between groups, training alternates fine-grained groups (one shared initial
//! noise) with coarse-grained groups (independent initial noises) on a fixed
//! period. Within a group, every member is rolled out only to the perception
//! knot, scored through its single-step clean prediction, clustered, and only
//! one representative per cluster is carried to t = 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accum::LossGrad;
use crate::flow::{predict_from_velocity, TimeGrid, VelocityModel};
use crate::group::{Granularity, RolloutGroup};
use crate::objectives::{grpo_loss, ClipConfig, Subsample};
use crate::rng::NoiseKey;
use crate::sde::{extend_rollout, NoiseSchedule};
use crate::trajectory::Trajectory;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularitySchedule {
    pub fine_steps: usize,
    pub coarse_steps: usize,
}

impl GranularitySchedule {
    pub fn new(fine_steps: usize, coarse_steps: usize) -> Result<Self> {
        if fine_steps == 0 || coarse_steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs at least one fine and one coarse slot, got {fine_steps}/{coarse_steps}"
            )));
        }
        Ok(Self {
            fine_steps,
            coarse_steps,
        })
    }

    /// Period `j` with `round(j·ratio)` coarse slots at the end of each period.
    pub fn from_ratio(period: usize, coarse_ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&coarse_ratio) {
            return Err(Error::InvalidArgument(format!("coarse ratio {coarse_ratio} outside [0, 1]")));
        }
        let coarse = (period as f64 * coarse_ratio).round() as usize;
        Self::new(period.saturating_sub(coarse), coarse)
    }

    pub fn period(&self) -> usize {
        self.fine_steps + self.coarse_steps
    }

    pub fn coarse_ratio(&self) -> f64 {
        self.coarse_steps as f64 / self.period() as f64
    }

    pub fn granularity(&self, iter: usize) -> Granularity {
        schedule_granularity(iter, self)
    }
}

/// Fine for the first `fine_steps` iterations of each period, Coarse after.
pub fn schedule_granularity(iter: usize, sched: &GranularitySchedule) -> Granularity {
    if iter % sched.period() < sched.fine_steps {
        Granularity::Fine
    } else {
        Granularity::Coarse
    }
}

/// Initial states of a group. Coarse member `k` draws from `key.traj(k)`; a
/// fine group replicates the draw of `key.traj(0)`.
pub fn init_group_noises(granularity: Granularity, k: usize, d: usize, key: NoiseKey) -> Result<Vec<Vec<f64>>> {
    if k < 2 {
        return Err(Error::GroupTooSmall { min: 2, got: k });
    }
    Ok(match granularity {
        Granularity::Fine => vec![key.traj(0).normal_vec(d); k],
        Granularity::Coarse => (0..k).map(|i| key.traj(i as u64).normal_vec(d)).collect(),
    })
}

/// Single-step clean predictions from the current (last) state of each
/// trajectory, using the velocity cached during rollout. The prediction is
/// also stored on the trajectory.
pub fn coarse_progress_perception(trajs: &mut [Trajectory]) -> Result<Vec<Vec<f64>>> {
    trajs
        .iter_mut()
        .enumerate()
        .map(|(k, tr)| {
            let t = tr.current_t();
            let pred = if t == 0.0 {
                tr.last().to_vec()
            } else {
                let v = tr
                    .tail_velocity
                    .as_deref()
                    .ok_or_else(|| Error::MissingTransition(format!("member {k} has no cached velocity")))?;
                predict_from_velocity(tr.last(), v, t)
            };
            tr.coarse_pred = Some(pred.clone());
            Ok(pred)
        })
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center, ties to the lowest index.
fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned centers.
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Lloyd's iterations from k-means++ seeding. An emptied cluster keeps its
/// previous center.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, rng: &mut impl Rng) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} points")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Dimension {
            expected: d,
            got: points.iter().map(|p| p.len()).find(|&l| l != d).unwrap_or(d),
        });
    }

    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            // guard against rounding leaving u ≥ 0 after the loop
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // every point already coincides with a center
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &centers[centers.len() - 1]));
        }
    }

    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }
    let inertia = points
        .iter()
        .zip(&assignment)
        .map(|(p, &a)| dist2(p, &centers[a]))
        .sum();
    Ok(KMeans {
        centers,
        assignment,
        inertia,
        iterations,
        converged,
    })
}

/// What the clustering runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// The coarse clean prediction itself.
    Perception,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub centers: Vec<Vec<f64>>,
    /// One representative per cluster, in cluster order.
    pub g1_indices: Vec<usize>,
    /// Everything else, ascending.
    pub g2_indices: Vec<usize>,
    pub inertia: f64,
    pub feature: FeatureMap,
}

/// Clusters the features into `k1` groups and keeps the sample nearest to each
/// center. Centers are visited in order; a sample already taken by an earlier
/// center is skipped so the next-nearest one fills in. Ties go to the lowest
/// index.
pub fn select_representatives(
    features: &[Vec<f64>],
    k1: usize,
    max_iters: usize,
    rng: &mut impl Rng,
) -> Result<SelectionResult> {
    let km = kmeans(features, k1, max_iters, rng)?;
    let mut taken = vec![false; features.len()];
    let mut g1 = Vec::with_capacity(k1);
    for c in &km.centers {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in features.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist2(f, c);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k1 <= number of features");
        taken[i] = true;
        g1.push(i);
    }
    let g2 = (0..features.len()).filter(|&i| !taken[i]).collect();
    Ok(SelectionResult {
        centers: km.centers,
        g1_indices: g1,
        g2_indices: g2,
        inertia: km.inertia,
        feature: FeatureMap::Perception,
    })
}

/// Carries each partial trajectory on to t = 0. `keys[i]` must be the
/// trajectory key the member was started with so that the continuation uses
/// the same per-step noise addresses.
pub fn refine_fine_grained(
    model: &VelocityModel,
    trajs: &mut [Trajectory],
    keys: &[NoiseKey],
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<()> {
    use rayon::prelude::*;
    if keys.len() != trajs.len() {
        return Err(Error::InvalidArgument(format!("{} keys for {} trajectories", keys.len(), trajs.len())));
    }
    trajs
        .par_iter_mut()
        .zip(keys.par_iter())
        .try_for_each(|(tr, key)| extend_rollout(model, tr, grid, sched, *key, 0))
}

/// Sum of the GRPO losses of the refined group and the perception group, each
/// normalized on its own. The second group draws its timestep subset from a
/// separate address.
pub fn dual_group_loss(
    model: &VelocityModel,
    old: &VelocityModel,
    g1: &RolloutGroup,
    g2: Option<&RolloutGroup>,
    clip: &ClipConfig,
    sub: &Subsample,
) -> Result<LossGrad> {
    let mut total = grpo_loss(model, old, &[g1], clip, sub)?;
    if let Some(g2) = g2.filter(|g| !g.is_empty()) {
        let sub2 = Subsample::new(sub.fraction, sub.key.step(sub.key.step.wrapping_add(1 << 32)));
        let part = grpo_loss(model, old, &[g2], clip, &sub2)?;
        total.add_scaled(&part, 1.0);
    }
    Ok(total)
}

/// Policy step-evaluations of one group. `perception_knot` is counted from the
/// clean end: members take `steps − perception_knot` steps before perception,
/// then `k1` of them take the remaining `perception_knot`.
pub fn step_evaluations(k: usize, k1: usize, steps: usize, perception_knot: usize) -> (usize, usize) {
    let dgr = k * (steps - perception_knot) + k1 * perception_knot;
    (dgr, k * steps)
}

/// Per-iteration selection record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub iter: usize,
    pub cond: usize,
    pub granularity: Granularity,
    pub g1_indices: Vec<usize>,
    pub g2_indices: Vec<usize>,
    pub inertia: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        NoiseKey::new(Stream::Clustering, seed).rng()
    }

    #[test]
    fn schedule_examples() {
        let s = GranularitySchedule::from_ratio(40, 0.25).unwrap();
        assert_eq!((s.fine_steps, s.coarse_steps), (30, 10));
        assert_eq!(s.granularity(0), Granularity::Fine);
        assert_eq!(s.granularity(29), Granularity::Fine);
        assert_eq!(s.granularity(30), Granularity::Coarse);
        assert_eq!(s.granularity(40), Granularity::Fine);
        assert!(GranularitySchedule::new(0, 3).is_err());
    }

    #[test]
    fn fine_noises_are_shared() {
        let key = NoiseKey::new(Stream::InitialNoise, 3);
        let f = init_group_noises(Granularity::Fine, 12, 2, key).unwrap();
        assert!(f.iter().all(|x| x == &f[0]));
        let c = init_group_noises(Granularity::Coarse, 12, 2, key).unwrap();
        for i in 0..12 {
            for j in i + 1..12 {
                assert_ne!(c[i], c[j]);
            }
        }
        assert!(init_group_noises(Granularity::Fine, 1, 2, key).is_err());
    }

    #[test]
    fn coarse_noise_moments() {
        let n = 10_000;
        let key = NoiseKey::new(Stream::InitialNoise, 11);
        let xs = init_group_noises(Granularity::Coarse, n, 2, key).unwrap();
        let nf = n as f64;
        let m: Vec<f64> = (0..2).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / nf).collect();
        for a in 0..2 {
            for b in 0..2 {
                let c = xs.iter().map(|x| (x[a] - m[a]) * (x[b] - m[b])).sum::<f64>() / nf;
                let expect = if a == b { 1.0 } else { 0.0 };
                // standard error of a covariance entry is about sqrt(2/n) on the diagonal
                let se = if a == b { (2.0 / nf).sqrt() } else { (1.0 / nf).sqrt() };
                assert!((c - expect).abs() < 3.0 * se, "cov[{a}][{b}] = {c}");
            }
        }
    }

    #[test]
    fn kmeans_examples() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![10.0, 11.0]];
        let km = kmeans(&pts, 2, 100, &mut rng(1)).unwrap();
        let mut c = km.centers.clone();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(c, vec![vec![0.0, 0.5], vec![10.0, 10.5]]);

        let km = kmeans(&pts, 4, 100, &mut rng(2)).unwrap();
        assert_eq!(km.inertia, 0.0);
        assert!(kmeans(&pts, 5, 100, &mut rng(2)).is_err());
    }

    /// Best 2-partition of a 1-D set by exhaustive search.
    fn brute_two_means(xs: &[f64]) -> Vec<f64> {
        let n = xs.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let (a, b): (Vec<f64>, Vec<f64>) = (0..n).map(|i| (mask >> i & 1 == 1, xs[i])).fold(
                (vec![], vec![]),
                |(mut a, mut b), (side, x)| {
                    if side {
                        a.push(x)
                    } else {
                        b.push(x)
                    }
                    (a, b)
                },
            );
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let cost: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
            if cost < best.0 {
                let mut c = vec![ma, mb];
                c.sort_by(f64::total_cmp);
                best = (cost, c);
            }
        }
        best.1
    }

    #[test]
    fn kmeans_matches_exhaustive_search() {
        let xs = [0.0, 1.0, 2.0, 9.0, 10.0, 11.0];
        let oracle = brute_two_means(&xs);
        assert_eq!(oracle, vec![1.0, 10.0]);
        for seed in 0..20 {
            let pts: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
            let km = kmeans(&pts, 2, 100, &mut rng(seed)).unwrap();
            let mut c: Vec<f64> = km.centers.iter().map(|c| c[0]).collect();
            c.sort_by(f64::total_cmp);
            assert_eq!(c, oracle);
        }
    }

    #[test]
    fn selection_covers_clusters() {
        let mut feats = Vec::new();
        for i in 0..6 {
            feats.push(vec![0.01 * i as f64, 0.0]);
            feats.push(vec![5.0 + 0.01 * i as f64, 5.0]);
        }
        let s = select_representatives(&feats, 2, 50, &mut rng(4)).unwrap();
        assert_eq!(s.g1_indices.len(), 2);
        let sides: Vec<bool> = s.g1_indices.iter().map(|&i| feats[i][0] > 2.0).collect();
        assert_ne!(sides[0], sides[1]);
        assert_eq!(s.g2_indices.len(), 10);

        let all = select_representatives(&feats, 12, 50, &mut rng(4)).unwrap();
        let mut g1 = all.g1_indices.clone();
        g1.sort();
        assert_eq!(g1, (0..12).collect::<Vec<_>>());
        assert!(all.g2_indices.is_empty());
    }

    #[test]
    fn selection_is_more_diverse_than_top_rewards() {
        // Top rewards sit together near the target; a few poor samples spread out.
        let target = [0.0, 0.0];
        let mut feats = vec![vec![0.0, 0.05], vec![0.05, 0.0], vec![-0.05, 0.0], vec![0.0, -0.05]];
        feats.extend([vec![3.0, 0.0], vec![0.0, 3.0], vec![-3.0, 0.0], vec![0.0, -3.0]]);
        let rewards: Vec<f64> = feats.iter().map(|f| -dist2(f, &target).sqrt()).collect();
        let k1 = 4;
        let mut order: Vec<usize> = (0..feats.len()).collect();
        order.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]));
        let top: Vec<Vec<f64>> = order[..k1].iter().map(|&i| feats[i].clone()).collect();
        let s = select_representatives(&feats, k1, 50, &mut rng(8)).unwrap();
        let picked: Vec<Vec<f64>> = s.g1_indices.iter().map(|&i| feats[i].clone()).collect();
        let div = crate::rewards::group_diversity;
        assert!(div(&picked).unwrap() >= div(&top).unwrap());
    }

    #[test]
    fn step_count_example() {
        assert_eq!(step_evaluations(12, 6, 16, 12), (120, 192));
        assert_eq!(step_evaluations(12, 12, 16, 16), (192, 192));
    }

    proptest! {
        #[test]
        fn schedule_emits_coarse_ratio(fine in 1usize..50, coarse in 1usize..50, periods in 1usize..4) {
            let s = GranularitySchedule::new(fine, coarse).unwrap();
            let n = periods * s.period();
            let c = (0..n).filter(|&i| s.granularity(i) == Granularity::Coarse).count();
            prop_assert_eq!(c, periods * coarse);
            for i in 0..s.period() {
                prop_assert_eq!(s.granularity(i), s.granularity(i + s.period()));
            }
        }

        #[test]
        fn selection_partitions(seed in 0u64..1000, n in 2usize..16, k1 in 1usize..16) {
            prop_assume!(k1 <= n);
            let mut r = rng(seed);
            let feats: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random::<f64>(), r.random::<f64>()]).collect();
            let s = select_representatives(&feats, k1, 50, &mut r).unwrap();
            prop_assert_eq!(s.g1_indices.len(), k1);
            let mut all: Vec<usize> = s.g1_indices.iter().chain(&s.g2_indices).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
