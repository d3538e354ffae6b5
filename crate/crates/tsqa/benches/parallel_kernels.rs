//! Sequential vs row-parallel kernels, and batch-level work fan-out. The
//! parallel matmul keeps each row's accumulation order sequential, so both
//! variants produce bitwise-identical output; these benches measure the
//! speed difference that buys.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use tsqa::numerics::kernels::matmul_seq;
use tsqa::par;

#[cfg(feature = "parallel")]
use tsqa::numerics::kernels::matmul_par;

fn filled(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * 0.37).sin()).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &n in &[64usize, 128, 256] {
        let a = filled(n * n);
        let b = filled(n * n);
        group.throughput(Throughput::Elements((n * n * n) as u64));
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bench, &n| {
            bench.iter(|| matmul_seq(black_box(&a), black_box(&b), n, n, n));
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("row_parallel", n), &n, |bench, &n| {
            bench.iter(|| matmul_par(black_box(&a), black_box(&b), n, n, n));
        });
    }
    group.finish();
}

/// Batch-level fan-out as used for rollout groups: one matmul per item,
/// either in a plain loop or through the feature-selected map.
fn bench_batch_map(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_map");
    let items: Vec<Vec<f64>> = (0..16).map(|i| filled(96 * 96 + i)).collect();
    let w = filled(96 * 96);
    let work = |x: &Vec<f64>| -> f64 {
        let out = matmul_seq(&x[..96 * 96], &w, 96, 96, 96);
        out.iter().sum()
    };
    group.bench_function("sequential_loop", |bench| {
        bench.iter(|| {
            let out: Vec<f64> = black_box(&items).iter().map(work).collect();
            out
        });
    });
    group.bench_function("feature_selected", |bench| {
        bench.iter(|| par::map_collect(black_box(&items), work));
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_batch_map);
criterion_main!(benches);
