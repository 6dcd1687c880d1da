use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use flowrft_core::cpgo::{cpgo_loss, CpgoConfig};
use flowrft_core::dgr::{init_group_noises, select_representatives};
use flowrft_core::flow::{fm_loss, PretrainBatch};
use flowrft_core::harness::GradientFixture;
use flowrft_core::objectives::{grpo_loss, ClipConfig, Subsample};
use flowrft_core::sde::{rollout, NoiseSchedule};
use flowrft_core::vh::{edge_artifact, noise_estimate, NoiseParams};
use flowrft_core::{Arch, Granularity, GrayImage, NoiseKey, Stream, TimeGrid, VelocityModel};

fn model() -> VelocityModel {
    VelocityModel::new(Arch::default(), 1)
}

fn network(c: &mut Criterion) {
    let m = model();
    let x = [0.3, -0.7];
    c.bench_function("forward", |b| b.iter(|| m.forward(black_box(&x), 0.4, 3)));
    let mut grad = vec![0.0; m.num_params()];
    c.bench_function("forward_backward", |b| {
        b.iter(|| {
            let (v, tape) = m.forward_tape(black_box(&x), 0.4, 3);
            m.backward(&tape, &v, &mut grad);
        })
    });
    let mut rng = NoiseKey::new(Stream::Pretrain, 0).rng();
    let batch = PretrainBatch::sample(&flowrft_core::flow::GaussianMixture::default(), 256, &mut rng);
    c.bench_function("fm_loss_256", |b| b.iter(|| fm_loss(&m, black_box(&batch)).unwrap()));
}

fn sampling(c: &mut Criterion) {
    let m = model();
    let grid = TimeGrid::shifted(16, 3.0).unwrap();
    let sched = NoiseSchedule::constant(0.3, &grid);
    let init = init_group_noises(Granularity::Coarse, 12, 2, NoiseKey::new(Stream::InitialNoise, 0)).unwrap();
    let key = NoiseKey::new(Stream::StepNoise, 0);
    c.bench_function("rollout_group_12x16", |b| {
        b.iter(|| rollout(&m, black_box(&init), &grid, 2, &sched, key, 0).unwrap())
    });
    let feats: Vec<Vec<f64>> = (0..12).map(|i| key.traj(i).normal_vec(2)).collect();
    c.bench_function("select_representatives_12", |b| {
        b.iter(|| {
            let mut rng = NoiseKey::new(Stream::Clustering, 0).rng();
            select_representatives(black_box(&feats), 6, 50, &mut rng).unwrap()
        })
    });
}

fn objectives(c: &mut Criterion) {
    let fx = GradientFixture::new(Arch::default(), 3).unwrap();
    let clip = ClipConfig::default();
    let all = Subsample::all();
    c.bench_function("grpo_loss", |b| {
        b.iter(|| grpo_loss(&fx.model, &fx.old, &[black_box(&fx.group)], &clip, &all).unwrap())
    });
    let trajs: Vec<_> = fx.group.trajectories.iter().collect();
    let cfg = CpgoConfig::default();
    c.bench_function("cpgo_loss", |b| b.iter(|| cpgo_loss(&fx.model, &fx.old, black_box(&trajs), &cfg).unwrap()));
}

fn image_metrics(c: &mut Criterion) {
    let z = NoiseKey::new(Stream::Eval, 0).normal_vec(128 * 128);
    let img = GrayImage::from_fn(128, 128, |x, y| {
        let base = if (x as f64 - 64.0).hypot(y as f64 - 64.0) < 30.0 { 190.0 } else { 50.0 };
        (base + 6.0 * z[y * 128 + x]).clamp(0.0, 255.0)
    })
    .unwrap();
    c.bench_function("canny_edge_artifact_128", |b| b.iter(|| edge_artifact(black_box(&img), 50.0, 150.0).unwrap()));
    let p = NoiseParams::default();
    c.bench_function("noise_estimate_128", |b| b.iter(|| noise_estimate(black_box(&img), &p).unwrap()));
}

criterion_group!(benches, network, sampling, objectives, image_metrics);
criterion_main!(benches);
