use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use marginforge_core::attack::{fgsm, AttackLoss};
use marginforge_core::harness::loss_and_grads;
use marginforge_core::margin::{exact_distance_oracle_2d, PolarGrid};
use marginforge_core::optim::{self, OptimizerState};
use marginforge_core::{LayerSet, LossSpec, MarginConfig, Model, NormExponent, OptimizerConfig, Tensor};

fn batch(rows: usize, cols: usize) -> (Tensor, Vec<usize>) {
    let data = (0..rows * cols).map(|i| ((i * 7919) % 256) as f64 / 255.0).collect();
    (Tensor::new(vec![rows, cols], data).unwrap(), (0..rows).map(|i| i % 10).collect())
}

fn margin(top_k: usize) -> LossSpec {
    let mut m = MarginConfig::new(NormExponent::Inf, LayerSet::ALL, 1.0);
    m.top_k = Some(top_k);
    LossSpec::Margin(m)
}

fn losses(c: &mut Criterion) {
    let model = Model::mlp(784, &[256, 256], 10, 1).unwrap();
    let (x, y) = batch(64, 784);
    let mut group = c.benchmark_group("loss_and_grads/mnist_mlp_b64");
    group.sample_size(20);
    for (name, loss) in [("cross_entropy", LossSpec::CrossEntropy), ("margin_top1", margin(1)), ("margin_top9", margin(9))] {
        group.bench_function(name, |b| b.iter(|| loss_and_grads(black_box(&model), &loss, &x, &y).unwrap()));
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let model = Model::mlp(784, &[256, 256], 10, 1).unwrap();
    let (x, y) = batch(64, 784);
    let names = model.param_names();
    let config = OptimizerConfig::sgd(0.05, 0.9);
    c.bench_function("sgd_step/mnist_mlp_b64", |b| {
        b.iter_batched(
            || {
                let params = model.params().to_vec();
                let state = OptimizerState::new(&params);
                let (_, grads) = loss_and_grads(&model, &LossSpec::CrossEntropy, &x, &y).unwrap();
                (params, state, grads)
            },
            |(mut params, mut state, grads)| optim::step(&mut params, &grads, &names, &mut state, &config).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn attacks(c: &mut Criterion) {
    let model = Model::mlp(784, &[256, 256], 10, 1).unwrap();
    let (x, y) = batch(256, 784);
    c.bench_function("fgsm/mnist_mlp_b256", |b| {
        b.iter(|| fgsm(&model, AttackLoss::CrossEntropy, black_box(&x), &y, 0.1, Some([0.0, 1.0])).unwrap())
    });
}

fn oracle(c: &mut Criterion) {
    let model = Model::mlp(2, &[16], 3, 2).unwrap();
    let grid = PolarGrid::default();
    c.bench_function("exact_distance_oracle_2d/default_grid", |b| {
        b.iter(|| exact_distance_oracle_2d(&model, black_box(&[0.3, 0.6]), 0, 1, NormExponent::Two, &grid, 40))
    });
}

criterion_group!(benches, losses, train_step, attacks, oracle);
criterion_main!(benches);
