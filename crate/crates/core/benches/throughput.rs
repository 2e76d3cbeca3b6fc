//! Parallel against sequential execution of the data-parallel sections.
//!
//! Without the `parallel` feature both variants take the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gmvq::bias::{run_bias_sweep, BiasSweepConfig};
use gmvq::codebook::kmeans_fit;
use gmvq::diff::Graph;
use gmvq::harness::model::Relaxation;
use gmvq::harness::{build_model, evaluate, make_synthetic_dataset, ModelConfig};
use gmvq::par;
use gmvq::sampling::StepNoise;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn modes(c: &mut Criterion, group: &str, mut f: impl FnMut()) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::from_parameter("parallel"), |b| b.iter(&mut f));
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| {
        b.iter(|| par::sequential(&mut f))
    });
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let model = build_model(&cfg).unwrap();
    let data = make_synthetic_dataset(16, cfg.input_dim, cfg.batch_size, 3.0, 0.15, 1).unwrap();
    let noise = StepNoise::draw(
        &mut ChaCha8Rng::seed_from_u64(2),
        cfg.batch_size,
        cfg.codebook_size,
        cfg.latent_dim,
    );
    modes(c, "gmvq_train_step", || {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let out = model
            .forward(&mut g, &bound, &data.data, &noise, 1.0, Relaxation::Hard)
            .unwrap();
        std::hint::black_box(g.backward(out.total).unwrap());
    });
}

fn kmeans(c: &mut Criterion) {
    let data = make_synthetic_dataset(32, 8, 4096, 3.0, 0.3, 3).unwrap();
    modes(c, "kmeans_4096x8_c32", || {
        std::hint::black_box(kmeans_fit(&data.data, 32, 10, 0).unwrap());
    });
}

fn eval(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let model = build_model(&cfg).unwrap();
    let data = make_synthetic_dataset(16, cfg.input_dim, 4096, 3.0, 0.15, 4).unwrap();
    modes(c, "evaluate_4096", || {
        std::hint::black_box(evaluate(&model, &data, cfg.batch_size).unwrap());
    });
}

fn bias(c: &mut Criterion) {
    let cfg = BiasSweepConfig::default();
    modes(c, "bias_sweep_20_seeds", || {
        std::hint::black_box(run_bias_sweep(&cfg).unwrap());
    });
}

criterion_group!(benches, train_step, kmeans, eval, bias);
criterion_main!(benches);
