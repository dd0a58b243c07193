use biphoton_bench::double_slit_setup;
use biphoton_core::{run_pipeline, ExecutionPlan, OutputRequest};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn modes(c: &mut Criterion) {
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    let cache = std::env::temp_dir();
    for n in [16, 24, 32] {
        let setup = double_slit_setup(n);
        let out = OutputRequest::default();
        g.bench_with_input(BenchmarkId::new("in_core", n), &n, |b, _| {
            b.iter(|| run_pipeline(&setup, &ExecutionPlan::in_core(u64::MAX), &out).unwrap())
        });
        let spill = ExecutionPlan::spill(4 * biphoton_core::engine::row_bytes(n), &cache);
        g.bench_with_input(BenchmarkId::new("spill", n), &n, |b, _| {
            b.iter(|| run_pipeline(&setup, &spill, &out).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, modes);
criterion_main!(benches);
