use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mislabel_forge::data::{generate_blobs, make_folds, SyntheticSpec};
use mislabel_forge::detect_cl::out_of_fold_probs;
use mislabel_forge::exec::Execution;
use mislabel_forge::harness::run_sweep;
use mislabel_forge::losses::LossSpec;
use mislabel_forge::ExperimentConfig;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seeds: vec![1, 2],
        ..Default::default()
    };
    cfg.train.epochs = 5;
    cfg
}

fn folds(c: &mut Criterion) {
    let cfg = bench_config();
    let data = generate_blobs(&SyntheticSpec::default()).unwrap();
    let plan = make_folds(&data, 5, 1).unwrap();
    let net = cfg.net_config(data.feature_dim(), data.num_classes(), 1);
    let train = cfg.train_config(LossSpec::ce(), 1);
    let mut group = c.benchmark_group("out_of_fold_probs");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| out_of_fold_probs(black_box(&data), &plan, &net, &train, exec).unwrap())
        });
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let mut cfg = bench_config();
    cfg.sweep.gamma = vec![0.0, 0.5];
    cfg.sweep.cutoff = vec![0.05, 0.1];
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_sweep(black_box(&cfg), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, folds, sweep);
criterion_main!(benches);
