//! Parallel vs sequential throughput of the hot kernels: the matmul that
//! dominates layer forwards and a whole masked-model forward. The sequential
//! side runs through `sequential_scope`, which pins every maybe-parallel
//! helper to the calling thread, so both sides execute identical code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use finegates::compact::{binarize, masked_dense_model, CompactionPolicy};
use finegates::data::BatchInput;
use finegates::gates::SparsityObjective;
use finegates::matrix::Matrix;
use finegates::model::{build_mlp, TaskKind};
use finegates::parallel::sequential_scope;
use finegates::rng::RngStream;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_nt");
    for &n in &[64usize, 256, 512] {
        let mut rng = RngStream::new(1);
        let x = Matrix::<f32>::from_fn(32, n, |_, _| rng.next_gauss() as f32);
        let w = Matrix::<f32>::from_fn(n, n, |_, _| rng.next_gauss() as f32);
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, _| {
            b.iter(|| std::hint::black_box(x.matmul_nt(&w)))
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, _| {
            b.iter(|| sequential_scope(|| std::hint::black_box(x.matmul_nt(&w))))
        });
    }
    group.finish();
}

fn bench_model_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("masked_forward");
    for &width in &[128usize, 512] {
        let model = build_mlp::<f32>(
            &[width, width, width],
            8,
            SparsityObjective::new(0.0, 0.0),
            TaskKind::Classification,
            0.5,
            7,
        )
        .unwrap();
        let bin = binarize(&model, CompactionPolicy::Tau(0.5));
        let baked = masked_dense_model(&model, &bin).unwrap();
        let mut rng = RngStream::new(2);
        let input = BatchInput::Dense(Matrix::<f32>::from_fn(32, width, |_, _| {
            rng.next_gauss() as f32
        }));
        group.bench_with_input(BenchmarkId::new("parallel", width), &width, |b, _| {
            b.iter(|| std::hint::black_box(baked.forward(&input.as_input_ref()).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("sequential", width), &width, |b, _| {
            b.iter(|| {
                sequential_scope(|| {
                    std::hint::black_box(baked.forward(&input.as_input_ref()).unwrap())
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_model_forward);
criterion_main!(benches);
