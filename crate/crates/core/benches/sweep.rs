//! Parallel against sequential execution of the two data-parallel workloads:
//! discriminator gradients over lattice chunks and a sweep of short runs.
//! Build with `--no-default-features` to make the parallel arm sequential too.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gngan::eval::input_gradients;
use gngan::objectives::HyperParams;
use gngan::synth::{grid25_spec, sample_data};
use gngan::train::{train, Architecture, GnGanModel, TrainSetup};
use gngan::{par, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lattice_chunks(side: usize, chunk: usize) -> Vec<Matrix> {
    let pts: Vec<[f64; 2]> = (0..side * side)
        .map(|k| {
            let (i, j) = (k / side, k % side);
            [-5.0 + 10.0 * i as f64 / (side - 1) as f64, -5.0 + 10.0 * j as f64 / (side - 1) as f64]
        })
        .collect();
    pts.chunks(chunk).map(Matrix::from_rows).collect()
}

fn gradient_field(c: &mut Criterion) {
    let hp = HyperParams::default();
    let model = GnGanModel::init(&Architecture::grid(2, 2), &hp, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let disc = model.discriminator;
    let mut group = c.benchmark_group("gradient_field");
    for side in [40usize, 120] {
        let chunks = lattice_chunks(side, 256);
        group.bench_with_input(BenchmarkId::new("parallel", side), &chunks, |b, chunks| {
            b.iter(|| par::map(chunks.clone(), |m| input_gradients(&disc, &m).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("sequential", side), &chunks, |b, chunks| {
            b.iter(|| {
                chunks
                    .clone()
                    .into_iter()
                    .map(|m| input_gradients(&disc, &m).unwrap())
                    .collect::<Vec<_>>()
            })
        });
    }
    group.finish();
}

fn setup(seed: u64) -> TrainSetup {
    let spec = grid25_spec();
    let hp = HyperParams {
        batch_size: 32,
        epochs: 1,
        seed,
        ..Default::default()
    };
    TrainSetup {
        hp,
        arch: Architecture::grid(2, 2),
        data: sample_data(&spec, 512, &mut ChaCha8Rng::seed_from_u64(seed)),
        spec: Some(spec),
        eval_every: 1_000,
        log_every: 1_000,
    }
}

fn seed_sweep(c: &mut Criterion) {
    let seeds: Vec<u64> = (0..4).collect();
    let mut group = c.benchmark_group("seed_sweep");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| par::map(seeds.clone(), |s| train(setup(s)).unwrap().report))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| seeds.iter().map(|&s| train(setup(s)).unwrap().report).collect::<Vec<_>>())
    });
    group.finish();
}

criterion_group!(benches, gradient_field, seed_sweep);
criterion_main!(benches);
