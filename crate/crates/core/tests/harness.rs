mod common;

use flowrft_core::dgr::{schedule_granularity, GranularitySchedule};
use flowrft_core::flow::checkpoint;
use flowrft_core::harness::{
    finetune, pretrain_model, read_metrics, run_diagnostics, run_eval_vh, run_finetune, run_verify, InputRecord,
    METRICS_FILE, TRAJECTORY_FILE,
};
use flowrft_core::sde::{rollout, NoiseSchedule};
use flowrft_core::trajectory::write_trajectories;
use flowrft_core::{ExperimentConfig, Granularity, GrayImage, Method, NoiseKey, Stream, VhParams};
use std::path::Path;

fn small_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.pretrain.steps = 400;
    cfg.optimizer.iterations = 6;
    cfg.schedule.period = 4;
    cfg.schedule.coarse_ratio = 0.5;
    cfg.eval.samples_per_cond = 4;
    cfg.diagnostics.seeds = 8;
    cfg.diagnostics.correlation_seeds = 6;
    cfg.diagnostics.scaling_probes = 8;
    cfg.output.dir = dir.to_path_buf();
    cfg.output.pretrained = dir.join("pretrained.ckpt");
    cfg
}

fn with_checkpoint(cfg: &ExperimentConfig) -> flowrft_core::VelocityModel {
    let (model, _) = pretrain_model(cfg).unwrap();
    checkpoint::save(&cfg.pretrained_path(), &model, cfg.seed).unwrap();
    model
}

#[test]
fn config_round_trip_and_validation() {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 77;
    cfg.method = Method::Ddpo;
    cfg.rollout.eta = 0.45;
    cfg.cpgo.omega = 0.125;
    cfg.model.hidden = vec![24, 24, 12];
    let text = cfg.to_toml_string().unwrap();
    assert!(text.contains("schema_version = 1"));
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);

    assert!(ExperimentConfig::from_toml_str("seed = 3").is_err());
    let minimal = ExperimentConfig::from_toml_str("schema_version = 1\nseed = 3").unwrap();
    assert_eq!(minimal.seed, 3);
    assert!(ExperimentConfig::from_toml_str("schema_version = 2").is_err());
    assert!(ExperimentConfig::from_toml_str("schema_version = 1\nmystery = 1").is_err());

    let broken = [
        "schema_version = 1\n[rollout]\ngroup_size = 1",
        "schema_version = 1\n[rollout]\nperception_knot = 40",
        "schema_version = 1\n[rollout]\nk1 = 13",
        "schema_version = 1\n[cpgo]\ntau = 2.0",
        "schema_version = 1\n[objectives]\ntimestep_fraction = 0.0",
        "schema_version = 1\n[grid]\nsteps = 0",
    ];
    for s in broken {
        assert!(ExperimentConfig::from_toml_str(s).is_err(), "{s}");
    }
}

#[test]
fn finetune_stream_schedule_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let model = with_checkpoint(&cfg);

    let out = run_finetune(&cfg).unwrap();
    let text = std::fs::read(dir.path().join(METRICS_FILE)).unwrap();
    let records = read_metrics(std::io::BufReader::new(&text[..])).unwrap();
    assert_eq!(records, out.records);
    assert_eq!(records.len(), cfg.optimizer.iterations);
    let sched = GranularitySchedule::from_ratio(cfg.schedule.period, cfg.schedule.coarse_ratio).unwrap();
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.iter, i);
        assert_eq!(r.granularity, schedule_granularity(i, &sched));
        assert!(r.wall_time.is_none());
    }
    assert!(dir.path().join(TRAJECTORY_FILE).exists());

    let again = finetune(&cfg, &model).unwrap();
    let mut bytes = Vec::new();
    flowrft_core::harness::write_metrics(&mut bytes, &again.records).unwrap();
    assert_eq!(bytes, text);
    assert_eq!(again.model.params(), out.model.params());

    // the baseline configuration: shared noise, no selection, and the
    // consistency loss is logged but carries no weight
    let mut base = cfg.clone();
    base.method = Method::Grpo;
    let b = finetune(&base, &model).unwrap();
    for r in &b.records {
        assert_eq!(r.granularity, Granularity::Fine);
        assert!((r.losses.total - r.losses.grpo).abs() <= 1e-12 * r.losses.grpo.abs().max(1e-12));
    }
    assert!(b.selections.is_empty());
}

#[test]
fn finetune_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let other = flowrft_core::VelocityModel::new(common::arch(&[8]), 0);
    assert!(finetune(&cfg, &other).is_err());
    assert!(run_finetune(&cfg).is_err());
}

#[test]
fn diagnostics_and_verify_on_a_small_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    with_checkpoint(&cfg);
    let d = run_diagnostics(&cfg).unwrap();
    assert_eq!(d.diversity.len(), cfg.diagnostics.seeds);
    assert!(d.diversity.iter().all(|r| r.fine_initial_diversity == 0.0));
    assert_eq!(d.correlation.len(), cfg.diagnostics.probe_knots.len());
    assert!(d.correlation.iter().all(|r| (-1.0..=1.0).contains(&r.mean_spearman)));

    let v = run_verify(&cfg).unwrap();
    for line in &v.report.lines {
        if line.name.starts_with("grad") || line.name.contains("clipped") || line.name.starts_with("grpo_") {
            assert!(line.pass, "{line}");
        }
    }
    assert!(v.report.lines.iter().any(|l| l.name.contains("clipped")));
}

#[test]
fn eval_vh_constant_images_and_straight_dump() {
    let dir = tempfile::tempdir().unwrap();
    for (i, v) in [0.0, 17.0, 200.0].iter().enumerate() {
        GrayImage::constant(20, 20, *v).save(dir.path().join(format!("flat{i}.pgm"))).unwrap();
    }
    let m = common::constant_field([0.3, -0.6]);
    let g = flowrft_core::TimeGrid::shifted(16, 3.0).unwrap();
    let sched = NoiseSchedule::constant(0.0, &g);
    let init: Vec<Vec<f64>> = (0..4).map(|i| NoiseKey::new(Stream::Eval, 0).traj(i).normal_vec(2)).collect();
    let trs = rollout(&m, &init, &g, 0, &sched, NoiseKey::new(Stream::StepNoise, 0), 0).unwrap();
    let f = std::fs::File::create(dir.path().join("straight_trajectories.jsonl")).unwrap();
    write_trajectories(f, &trs).unwrap();

    let paths = vec![dir.path().to_path_buf()];
    let out = run_eval_vh(&paths, &VhParams::default()).unwrap();
    assert_eq!(out.summary.images, 3);
    assert_eq!(out.summary.trajectory_files, 1);
    for r in &out.records {
        match r {
            InputRecord::Image { report, .. } => {
                assert_eq!(
                    (report.laplacian_variance, report.high_freq_energy, report.edge_artifact, report.noise_level),
                    (0.0, 0.0, 0.0, 0.0)
                );
            }
            InputRecord::Trajectories { latent_consistency, .. } => assert!(*latent_consistency < 1e-28),
            InputRecord::Error { error, .. } => panic!("{error}"),
        }
    }
    let again = run_eval_vh(&paths, &VhParams::default()).unwrap();
    assert_eq!(out.to_jsonl().unwrap(), again.to_jsonl().unwrap());

    let missing = run_eval_vh(&[dir.path().join("absent.pgm")], &VhParams::default()).unwrap();
    assert_eq!(missing.summary.errors, 1);
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = ExperimentConfig::load(root.join("default.toml")).unwrap();
    assert_eq!(default, ExperimentConfig::default());
    let smoke = ExperimentConfig::load(root.join("smoke.toml")).unwrap();
    assert_eq!(smoke.seed, 7);
}
