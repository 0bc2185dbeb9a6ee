use criterion::{criterion_group, criterion_main, Criterion};
use cvxq::parallel;

fn bench_indexed_map(c: &mut Criterion) {
    let work = |i: usize| -> f64 {
        let mut acc = 0.0f64;
        let mut x = i as f64 + 1.0;
        for _ in 0..2_000 {
            x = (x * 1.000_1).sin() + 1.5;
            acc += x;
        }
        acc
    };
    let mut group = c.benchmark_group("indexed_map_512");
    group.bench_function("parallel", |b| b.iter(|| parallel::run_indexed(512, work)));
    group.bench_function("sequential", |b| b.iter(|| parallel::run_indexed_seq(512, work)));
    group.finish();
}

criterion_group!(benches, bench_indexed_map);
criterion_main!(benches);
