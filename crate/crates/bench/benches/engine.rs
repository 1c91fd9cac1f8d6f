use std::hint::black_box;

use cold_bench::fixture;
use cold_core::engine::{split_and_score, SplitPlan};
use cold_core::features::{build_batch_column, build_batch_row, BatchPath};
use cold_core::numerics::{matmul, Matrix, PrecisionMode};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn feature_paths(c: &mut Criterion) {
    let f = fixture(8, 300);
    let schema = f.model.schema();
    let tables = f.model.tables();
    let mut group = c.benchmark_group("feature_path");
    group.throughput(Throughput::Elements(300));
    for path in [BatchPath::Row, BatchPath::Column] {
        group.bench_with_input(BenchmarkId::from_parameter(path), &path, |b, &path| {
            let mut i = 0;
            b.iter(|| {
                let q = &f.queries[i % f.queries.len()];
                i += 1;
                let batch = match path {
                    BatchPath::Row => build_batch_row(schema, tables, &q.user, &q.ads),
                    BatchPath::Column => build_batch_column(schema, tables, &q.user, &q.ads),
                };
                black_box(batch.unwrap())
            })
        });
    }
    group.finish();
}

fn matmul_precision(c: &mut Criterion) {
    let a = Matrix::from_fn(300, 256, |r, k| ((r * 7 + k) % 13) as f32 * 0.01);
    let w = Matrix::from_fn(256, 128, |k, j| ((k * 3 + j) % 11) as f32 * 0.01 - 0.05);
    let mut group = c.benchmark_group("matmul_300x256x128");
    for mode in [PrecisionMode::Full32, PrecisionMode::Emulated16] {
        group.bench_with_input(BenchmarkId::from_parameter(mode), &mode, |b, &mode| {
            b.iter(|| black_box(matmul(&a, &w, mode).unwrap()))
        });
    }
    group.finish();
}

fn split_and_merge(c: &mut Criterion) {
    let f = fixture(4, 1000);
    let mut group = c.benchmark_group("split_and_score_1000");
    group.sample_size(20);
    for chunk_size in [100, 300, 1000] {
        let plan = SplitPlan {
            chunk_size,
            parallel: true,
        };
        group.bench_with_input(BenchmarkId::from_parameter(chunk_size), &plan, |b, plan| {
            let mut i = 0;
            b.iter(|| {
                let q = &f.queries[i % f.queries.len()];
                i += 1;
                black_box(split_and_score(q, &f.model, plan).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, feature_paths, matmul_precision, split_and_merge);
criterion_main!(benches);
