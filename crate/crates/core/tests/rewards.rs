use flowrft_core::flow::GaussianMixture;
use flowrft_core::rewards::{
    group_contrast, group_diversity, rank_correlation, RewardKind, RewardSpec, WeightedReward,
};
use flowrft_core::Error;
use proptest::prelude::*;

fn spec(kind: RewardKind) -> RewardSpec {
    RewardSpec::for_mixture(kind, &GaussianMixture::default())
}

#[test]
fn reward_examples() {
    let s = spec(RewardKind::TargetDistance);
    let m = s.targets[2].clone();
    assert_eq!(s.evaluate(&m, 2).unwrap(), 0.0);
    assert!((s.evaluate(&[m[0] + 0.6, m[1] - 0.8], 2).unwrap() + 1.0).abs() < 1e-12);
    let q = spec(RewardKind::Quantized { step: 0.5 });
    assert_eq!(q.evaluate(&[m[0] + 0.7, m[1]], 2).unwrap(), -1.0);
    assert!(matches!(s.evaluate(&m, 99), Err(Error::UnknownCondition(99))));

    let c = spec(RewardKind::Composite {
        parts: vec![
            WeightedReward { weight: 2.0, kind: RewardKind::TargetDistance },
            WeightedReward { weight: 0.5, kind: RewardKind::Quantized { step: 0.5 } },
        ],
    });
    // distance 0.7: 2·(−0.7) + 0.5·(−1.0)
    assert!((c.evaluate(&[m[0], m[1] + 0.7], 2).unwrap() + 1.9).abs() < 1e-12);
    assert!(spec(RewardKind::Quantized { step: 0.0 }).validate().is_err());
}

#[test]
fn statistic_examples() {
    assert_eq!(group_diversity(&vec![vec![1.0, 2.0]; 5]).unwrap(), 0.0);
    assert_eq!(group_diversity(&[vec![-1.0, 0.0], vec![1.0, 0.0]]).unwrap(), 2.0);
    assert!(group_diversity(&[vec![0.0, 0.0]]).is_err());
    assert_eq!(group_contrast(&[0.0, 2.0]).unwrap(), 1.0);
    assert_eq!(group_contrast(&[3.0; 4]).unwrap(), 0.0);
    assert!((group_contrast(&[1.0, 2.0, 3.0]).unwrap() - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert!(group_contrast(&[1.0]).is_err());
}

#[test]
fn spearman_examples() {
    let a = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(rank_correlation(&a, &a).unwrap(), 1.0);
    let neg: Vec<f64> = a.iter().map(|x| -x).collect();
    assert_eq!(rank_correlation(&a, &neg).unwrap(), -1.0);
    assert!((rank_correlation(&a, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
    assert!(rank_correlation(&a, &[1.0, 2.0]).is_err());
}

// Pearson correlation of mid-ranks, computed independently.
fn spearman_oracle(a: &[f64], b: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|x| {
                let below = v.iter().filter(|y| *y < x).count() as f64;
                let equal = v.iter().filter(|y| *y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn samples() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 2..20)
}

proptest! {
    #[test]
    fn reward_is_deterministic(x in prop::array::uniform2(-8.0f64..8.0), c in 0usize..8) {
        let s = spec(RewardKind::Quantized { step: 0.25 });
        prop_assert_eq!(s.evaluate(&x, c).unwrap(), s.evaluate(&x, c).unwrap());
        prop_assert!(spec(RewardKind::TargetDistance).evaluate(&x, c).unwrap() <= 0.0);
    }

    #[test]
    fn diversity_translation_and_scaling(xs in samples(), shift in prop::array::uniform2(-100.0f64..100.0), lambda in -5.0f64..5.0) {
        let base = group_diversity(&xs).unwrap();
        let moved: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] + shift[0], x[1] + shift[1]]).collect();
        prop_assert!((group_diversity(&moved).unwrap() - base).abs() <= 1e-9 * base.max(1.0));
        let scaled: Vec<Vec<f64>> = xs.iter().map(|x| vec![lambda * x[0], lambda * x[1]]).collect();
        let want = lambda * lambda * base;
        prop_assert!((group_diversity(&scaled).unwrap() - want).abs() <= 1e-9 * want.max(1.0));
    }

    #[test]
    fn contrast_shift_invariance(rs in prop::collection::vec(-10.0f64..10.0, 2..30), c in -1e3f64..1e3) {
        let moved: Vec<f64> = rs.iter().map(|r| r + c).collect();
        let (a, b) = (group_contrast(&rs).unwrap(), group_contrast(&moved).unwrap());
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn spearman_matches_oracle(pairs in prop::collection::vec((0i32..6, 0i32..6), 3..25)) {
        // small integer ranges force ties
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let want = spearman_oracle(&a, &b);
        prop_assume!(want.is_finite());
        let got = rank_correlation(&a, &b).unwrap();
        prop_assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
        prop_assert!((-1.0..=1.0).contains(&got));
    }
}
