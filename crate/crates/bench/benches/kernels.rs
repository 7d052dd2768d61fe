use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use deal_bench::fixture;
use deal_core::grad::{gradients, leaves, Tape};
use deal_core::numerics::{gaussian_matrix, svd, Rng};
use deal_core::retention::{retention_forward, Activation, WaveletBank};
use deal_core::training::{deal_loss_on_tape, Optimizer, OptimizerKind, TrainConfig};

fn bench_svd(c: &mut Criterion) {
    let mut group = c.benchmark_group("svd");
    for (m, n) in [(8, 5), (32, 16), (64, 32)] {
        let y = gaussian_matrix(m, n, 0.0, 1.0, &mut Rng::new(1));
        group.bench_with_input(BenchmarkId::from_parameter(format!("{m}x{n}")), &y, |b, y| {
            b.iter(|| svd(black_box(y)).unwrap())
        });
    }
    group.finish();
}

fn bench_retention(c: &mut Criterion) {
    let mut group = c.benchmark_group("retention_forward");
    for (n, r) in [(16, 4), (32, 8), (64, 16)] {
        let bank = WaveletBank::identity_init(n, r, 2, r, 0.25, Activation::Tanh).unwrap();
        let y = gaussian_matrix(n, r, 0.0, 1.0, &mut Rng::new(2));
        group.bench_with_input(BenchmarkId::from_parameter(format!("{n}x{r}")), &y, |b, y| {
            b.iter(|| retention_forward(black_box(y), &bank).unwrap())
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("deal_train_step");
    let cfg = TrainConfig::default();
    for (n, r) in [(16, 4), (32, 8)] {
        let (model, q, g) = fixture(n, r, cfg.batch_size, 3);
        group.bench_function(BenchmarkId::from_parameter(format!("{n}x{r}")), |b| {
            b.iter(|| {
                let mut params = model.params();
                let mut tape = Tape::new();
                let vars = leaves(&mut tape, &params);
                let loss = deal_loss_on_tape(&model, &mut tape, &params, &vars, &q, &g, &cfg).unwrap();
                let grads = gradients(&tape, loss, &vars, &params).unwrap();
                Optimizer::new(OptimizerKind::Sgd, cfg.learning_rate).step(&mut params, &grads);
                black_box(params)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_svd, bench_retention, bench_train_step);
criterion_main!(benches);
