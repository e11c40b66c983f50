//! Rayon dispatch against the single-worker path on the same workloads.
//!
//! `par::sequential` pins the helpers to one worker, so both arms run the
//! identical code and differ only in scheduling.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tdsa_core::backbone::{self, BackboneConfig};
use tdsa_core::datagen::{self, SyntheticSpec};
use tdsa_core::experiment;
use tdsa_core::par;
use tdsa_core::trainer::{self, Sgd, TrainConfig};

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        milestones: vec![],
        backbone: BackboneConfig {
            input_h: 32,
            input_w: 32,
            widths: vec![16, 32, 32, 32],
            ..BackboneConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn data() -> datagen::SyntheticData {
    datagen::generate(&SyntheticSpec {
        image_size: 32,
        train_per_class: 4,
        test_per_class: 2,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn bench_step(c: &mut Criterion) {
    let cfg = config(1);
    let data = data();
    let idx: Vec<usize> = (0..cfg.batch_size).collect();
    let images = data.train.images.select_batch(&idx);
    let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
    let mut rng = trainer::init_rng(1);
    let masks_h = cfg.loss.sample_masks(cfg.backbone.spec_high(), &mut rng);
    let masks_l = cfg.loss.sample_masks(cfg.backbone.spec_mid(), &mut rng);
    let init = backbone::init_params(&cfg.backbone, &mut trainer::init_rng(0)).unwrap();

    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for mode in ["parallel", "sequential"] {
        group.bench_function(BenchmarkId::from_parameter(mode), |b| {
            let mut params = init.clone();
            let mut sgd = Sgd::new(&params);
            let mut step = || sgd.step(&mut params, &images, &labels, &cfg, 0.01, &masks_h, &masks_l).unwrap();
            if mode == "parallel" {
                b.iter(&mut step);
            } else {
                b.iter(|| par::sequential(&mut step));
            }
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let cfg = config(1);
    let data = data();
    let params = backbone::init_params(&cfg.backbone, &mut trainer::init_rng(0)).unwrap();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(|| trainer::evaluate(&params, &data.test, &cfg).unwrap()));
    group.bench_function("sequential", |b| {
        b.iter(|| par::sequential(|| trainer::evaluate(&params, &data.test, &cfg).unwrap()))
    });
    group.finish();
}

fn bench_seed_sweep(c: &mut Criterion) {
    let data = data();
    let configs = experiment::seed_sweep(&config(1), &[0, 1, 2, 3]);
    let mut group = c.benchmark_group("seed_sweep");
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(|| experiment::run_configs(&data.train, &data.test, &configs)));
    group.bench_function("sequential", |b| {
        b.iter(|| par::sequential(|| experiment::run_configs(&data.train, &data.test, &configs)))
    });
    group.finish();
}

criterion_group!(benches, bench_step, bench_evaluate, bench_seed_sweep);
criterion_main!(benches);
