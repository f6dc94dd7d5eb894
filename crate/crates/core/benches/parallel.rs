//! Sequential versus rayon execution of the batch-level loops. Without the
//! `parallel` feature both policies run sequentially.

use std::f64::consts::PI;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kope_core::gradcheck::{primitive_suite, GradCheckOptions};
use kope_core::kuramoto::{step_batch, CouplingMatrix, KuramotoConfig, PhaseState};
use kope_core::model::{batch_loss_and_grads, Loss, ModelConfig, ModelParams, Variant};
use kope_core::{Exec, KopeRng, Tensor};

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn batch_gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_loss_and_grads");
    group.sample_size(10);
    for variant in [Variant::Vit, Variant::Kope] {
        let cfg = ModelConfig::toy((8, 8), 4, 2, variant);
        let params = ModelParams::init(&cfg, 0).unwrap();
        let mut rng = KopeRng::new(1);
        let xs: Vec<Tensor> = (0..32)
            .map(|_| Tensor::new(vec![64, 4], rng.normal_vec(256, 1.0)).unwrap())
            .collect();
        let ys: Vec<usize> = (0..32).map(|i| i % 2).collect();
        for (name, exec) in POLICIES {
            group.bench_with_input(BenchmarkId::new(name, variant), &exec, |b, &exec| {
                b.iter(|| batch_loss_and_grads(&params, &cfg, &xs, &ys, Loss::CrossEntropy, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn kuramoto_batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("kuramoto_step_batch");
    let mut rng = KopeRng::new(2);
    let (tokens, heads, pairs) = (65, 4, 4);
    let states: Vec<PhaseState> = (0..64)
        .map(|_| {
            let a = rng.uniform_vec(tokens * heads * pairs, -PI, PI);
            PhaseState::from_angles(tokens, heads, pairs, &a).unwrap()
        })
        .collect();
    let couplings = vec![CouplingMatrix::uniform(heads, tokens); states.len()];
    let cfg = KuramotoConfig::default();
    for (name, exec) in POLICIES {
        group.bench_function(name, |b| b.iter(|| step_batch(&states, &couplings, &cfg, exec).unwrap()));
    }
    group.finish();
}

fn gradient_suite(c: &mut Criterion) {
    let mut group = c.benchmark_group("primitive_suite");
    group.sample_size(10);
    let opts = GradCheckOptions::default();
    for (name, exec) in POLICIES {
        group.bench_function(name, |b| b.iter(|| primitive_suite(20, 0, &opts, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, kuramoto_batch, gradient_suite);
criterion_main!(benches);
