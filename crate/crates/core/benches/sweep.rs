use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use comppow::experiment::{run_batch, sweep, Knob};
use comppow::{validate_spec, Exec, GpuSpec, KernelDesc, PolicyConfig, Scenario};

fn spec() -> comppow::ValidatedSpec {
    let text = include_str!("../../../specs/mi300x-like.json");
    let raw: GpuSpec = serde_json::from_str(text).expect("shipped spec parses");
    validate_spec(raw).expect("shipped spec validates")
}

fn allgather(spec: &comppow::ValidatedSpec) -> Scenario {
    let sizes = [160u64 << 20, 1536 << 20, 3584 << 20, 4 << 30, 7 << 30];
    let ks = sizes
        .iter()
        .enumerate()
        .map(|(i, &b)| KernelDesc::all_gather(&format!("ag{i}"), b, 8))
        .collect();
    let mut s = Scenario::new("bench", spec.clone(), vec![ks], PolicyConfig::Baseline);
    s.dt_s = 1e-5;
    s
}

fn batch(spec: &comppow::ValidatedSpec) -> Vec<Scenario> {
    let shapes = [
        (8192, 8192, 8192),
        (4096, 16384, 8192),
        (16384, 4096, 4096),
        (8192, 8192, 2048),
    ];
    shapes
        .iter()
        .enumerate()
        .map(|(i, &(m, n, k))| {
            let g = KernelDesc::gemm(&format!("g{i}"), m, n, k);
            let ag = KernelDesc::all_gather(&format!("ag{i}"), 1 << 30, 8);
            let mut s = Scenario::new("batch", spec.clone(), vec![vec![g], vec![ag]], PolicyConfig::Baseline);
            s.dt_s = 1e-5;
            s
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let spec = spec();
    let sc = allgather(&spec);
    let values: Vec<f64> = (0..16).map(|i| 2100.0 - 75.0 * i as f64).collect();
    let scenarios = batch(&spec);

    let mut g = c.benchmark_group("freq_cap_sweep");
    g.sample_size(10);
    for (name, exec) in [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)] {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| sweep(&sc, &Knob::FreqCap, &values, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("concurrent_batch");
    g.sample_size(10);
    for (name, exec) in [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)] {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run_batch(&scenarios, exec))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
