use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use flowlift::parallel::Parallelism;
use flowlift::synth::{synthesize_range, SynthConfig};
use flowlift::train::{evaluate, train, EvalConfig, TrainConfig};

const MODES: [(&str, Parallelism); 2] = [
    ("sequential", Parallelism::Sequential),
    ("parallel", Parallelism::Parallel),
];

fn synthesis(c: &mut Criterion) {
    let config = SynthConfig::default();
    let mut group = c.benchmark_group("synthesize_64");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| synthesize_range(&config, 0..64, mode).unwrap())
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let ds = synthesize_range(&SynthConfig::default(), 0..128, Parallelism::Parallel).unwrap();
    let config = TrainConfig::default().with_epochs(1);
    let mut group = c.benchmark_group("train_epoch_128");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| train(&ds, &config, None, mode).unwrap())
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let ds = synthesize_range(&SynthConfig::default(), 0..40, Parallelism::Parallel).unwrap();
    let model = train(
        &ds.subset(0..32),
        &TrainConfig::default().with_epochs(1),
        None,
        Parallelism::Parallel,
    )
    .unwrap()
    .model;
    let test = ds.subset(32..40);
    let config = EvalConfig {
        hypotheses: 20,
        ..EvalConfig::default()
    };
    let mut group = c.benchmark_group("evaluate_8x20");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&model, &test, &config, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, synthesis, training, sampling);
criterion_main!(benches);
