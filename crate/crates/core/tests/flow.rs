mod common;

use common::{constant_field, max_abs_diff};
use flowrft_core::flow::{
    fm_loss, interpolate, ode_sample, pretrain, single_step_predict, target_velocity, Arch, GaussianMixture,
    PretrainBatch, PretrainConfig, TimeGrid, VelocityModel,
};
use flowrft_core::harness::{pretrain_quality, ExperimentConfig};
use flowrft_core::optim::AdamConfig;
use flowrft_core::{Error, NoiseKey, Stream};
use proptest::prelude::*;

#[test]
fn interpolation_examples() {
    assert_eq!(interpolate(&[0.0, 0.0], &[2.0, 2.0], 0.5), vec![1.0, 1.0]);
    assert_eq!(interpolate(&[3.0, -1.0], &[5.0, 5.0], 0.0), vec![3.0, -1.0]);
    assert_eq!(interpolate(&[3.0, -1.0], &[5.0, 5.0], 1.0), vec![5.0, 5.0]);
    assert_eq!(target_velocity(&[3.0, -1.0], &[5.0, 5.0]), vec![2.0, 6.0]);
}

#[test]
fn fm_loss_is_zero_for_a_perfect_fit() {
    let u = [1.5, -0.5];
    let m = constant_field(u);
    let mut rng = NoiseKey::new(Stream::Eval, 1).rng();
    let mut b = PretrainBatch::sample(&GaussianMixture::default(), 16, &mut rng);
    for (x0, x1) in b.x0.iter().zip(b.x1.iter_mut()) {
        *x1 = vec![x0[0] + u[0], x0[1] + u[1]];
    }
    let lg = fm_loss(&m, &b).unwrap();
    assert!(lg.loss < 1e-24, "{}", lg.loss);
}

#[test]
fn fm_loss_constant_zero_model_single_pair() {
    let m = constant_field([0.0, 0.0]);
    for t in [0.0, 0.3, 1.0] {
        let b = PretrainBatch {
            x0: vec![vec![0.0, 0.0]],
            x1: vec![vec![1.0, 1.0]],
            t: vec![t],
            cond: vec![3],
        };
        assert_eq!(fm_loss(&m, &b).unwrap().loss, 2.0);
    }
}

#[test]
fn fm_loss_matches_term_by_term_evaluation() {
    let m = VelocityModel::new(Arch::default(), 3);
    let mut rng = NoiseKey::new(Stream::Eval, 2).rng();
    let b = PretrainBatch::sample(&GaussianMixture::default(), 64, &mut rng);
    let mut sum = 0.0;
    for i in 0..64 {
        let t = b.t[i];
        let xt: Vec<f64> = (0..2).map(|j| (1.0 - t) * b.x0[i][j] + t * b.x1[i][j]).collect();
        let v = m.forward(&xt, t, b.cond[i]);
        sum += (0..2).map(|j| (v[j] - (b.x1[i][j] - b.x0[i][j])).powi(2)).sum::<f64>();
    }
    let direct = sum / 64.0;
    let lib = fm_loss(&m, &b).unwrap().loss;
    assert!((lib - direct).abs() <= 1e-12 * direct.max(1.0), "{lib} vs {direct}");
}

#[test]
fn fm_loss_rejects_empty_batch() {
    let m = VelocityModel::new(Arch::tiny(), 0);
    let b = PretrainBatch {
        x0: vec![],
        x1: vec![],
        t: vec![],
        cond: vec![],
    };
    let err = fm_loss(&m, &b).unwrap_err();
    assert!(matches!(err, Error::EmptyBatch));
    assert_eq!(err.to_string(), "empty batch");
}

#[test]
fn ode_constant_field_lands_at_x1_minus_u() {
    let u = [0.7, -1.25];
    let m = constant_field(u);
    let grid = TimeGrid::shifted(16, 3.0).unwrap();
    let tr = ode_sample(&m, &[2.0, 1.0], &grid, 0).unwrap();
    assert!(max_abs_diff(tr.last(), &[2.0 - u[0], 1.0 - u[1]]) < 1e-14);
}

#[test]
fn ode_single_step_grid() {
    let m = VelocityModel::new(Arch::tiny(), 9);
    let grid = TimeGrid::uniform(1).unwrap();
    let x1 = [0.4, -0.2];
    let v = m.forward(&x1, 1.0, 2);
    let tr = ode_sample(&m, &x1, &grid, 2).unwrap();
    assert_eq!(tr.last(), &[x1[0] - v[0], x1[1] - v[1]]);
}

#[test]
fn single_step_prediction_examples() {
    let m = constant_field([2.0, 0.0]);
    assert_eq!(single_step_predict(&m, &[1.0, 1.0], 0.5, 0), vec![0.0, 1.0]);
    let r = VelocityModel::new(Arch::tiny(), 4);
    assert_eq!(single_step_predict(&r, &[0.3, -7.0], 0.0, 1), vec![0.3, -7.0]);
}

#[test]
fn straight_path_prediction_recovers_x0() {
    let u = [1.0, -2.0];
    let m = constant_field(u);
    let x0 = [0.5, 0.25];
    for t in [0.1, 0.4, 0.9, 1.0] {
        let xt = [x0[0] + t * u[0], x0[1] + t * u[1]];
        assert!(max_abs_diff(&single_step_predict(&m, &xt, t, 0), &x0) < 1e-14);
    }
}

#[test]
fn pretrain_zero_lr_keeps_params_and_is_reproducible() {
    let m = VelocityModel::new(Arch::tiny(), 5);
    let data = GaussianMixture::default();
    let cfg = PretrainConfig {
        steps: 20,
        batch_size: 16,
        optimizer: AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
        seed: 1,
    };
    let (out, hist) = pretrain(m.clone(), &data, &cfg).unwrap();
    assert_eq!(out.params(), m.params());
    assert_eq!(hist.records.len(), 20);
    let cfg = PretrainConfig {
        optimizer: AdamConfig::default(),
        ..cfg
    };
    let (a, _) = pretrain(m.clone(), &data, &cfg).unwrap();
    let (b, _) = pretrain(m.clone(), &data, &cfg).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), m.params());
}

#[test]
fn pretrained_model_quality_and_ode_accuracy() {
    let cfg = ExperimentConfig::default();
    let (model, hist) = flowrft_core::harness::pretrain_model(&cfg).unwrap();
    let n = hist.records.len();
    assert!(hist.window_mean(n - 100, n) < hist.window_mean(0, 100));
    let (ed, reference) = pretrain_quality(&model, &cfg, 1024).unwrap();
    assert!(ed < 3.0 * reference, "energy distance {ed} vs reference {reference}");

    // 16-step endpoints against a 256-step reference solve
    let coarse = TimeGrid::shifted(16, 3.0).unwrap();
    let fine = TimeGrid::shifted(256, 3.0).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..64u64 {
        let x1 = NoiseKey::new(Stream::Eval, 5).traj(i).normal_vec(2);
        let c = (i % 8) as usize;
        let a = ode_sample(&model, &x1, &coarse, c).unwrap();
        let b = ode_sample(&model, &x1, &fine, c).unwrap();
        worst = worst.max(max_abs_diff(a.last(), b.last()));
    }
    // modes sit 4 apart with spread 0.3; the endpoint must stay within the mode
    assert!(worst < 0.3, "16-step endpoint deviates by {worst}");

    // Lipschitz probe of π(·, t): a finite constant over sampled pairs
    let mut lip: f64 = 0.0;
    for i in 0..200u64 {
        let key = NoiseKey::new(Stream::Eval, 6).traj(i);
        let x = key.normal_vec(2);
        let y: Vec<f64> = key.step(1).normal_vec(2).iter().zip(&x).map(|(d, xi)| xi + 0.1 * d).collect();
        let t = (i as f64 + 0.5) / 200.0;
        let c = (i % 8) as usize;
        let (px, py) = (single_step_predict(&model, &x, t, c), single_step_predict(&model, &y, t, c));
        let num = ((px[0] - py[0]).powi(2) + (px[1] - py[1]).powi(2)).sqrt();
        let den = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
        lip = lip.max(num / den);
    }
    assert!(lip.is_finite() && lip < 100.0, "Lipschitz estimate {lip}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prediction_at_zero_is_identity(x in prop::array::uniform2(-50.0f64..50.0), seed in 0u64..100, c in 0usize..8) {
        let m = VelocityModel::new(Arch::tiny(), seed);
        prop_assert_eq!(single_step_predict(&m, &x, 0.0, c), x.to_vec());
    }

    #[test]
    fn ode_sample_is_deterministic(x in prop::array::uniform2(-3.0f64..3.0), seed in 0u64..50, steps in 1usize..20) {
        let m = VelocityModel::new(Arch::tiny(), seed);
        let g = TimeGrid::shifted(steps, 3.0).unwrap();
        prop_assert_eq!(ode_sample(&m, &x, &g, 1).unwrap(), ode_sample(&m, &x, &g, 1).unwrap());
    }

    #[test]
    fn shifted_grid_is_increasing_with_fixed_ends(steps in 1usize..200, shift in 0.2f64..8.0) {
        let g = TimeGrid::shifted(steps, shift).unwrap();
        let k = g.knots();
        prop_assert_eq!(k[0], 0.0);
        prop_assert_eq!(k[steps], 1.0);
        prop_assert!(k.windows(2).all(|w| w[1] > w[0]));
    }
}
