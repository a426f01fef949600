//! Path-level workloads on a one-thread pool against the full pool.
//!
//! Built with default features both arms use the rayon core; build with
//! `--no-default-features` to time the sequential fallback itself.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rsmp::bench::benchmark;
use rsmp::control_space::{FeedbackMode, RelaxedControl};
use rsmp::forward_sim::{sample_noise, simulate};
use rsmp::regression::BasisSpec;
use rsmp::smp::{hamiltonian_field, InfoMode};
use rsmp::solve_bsde;

const PATHS: usize = 5_000;
const STEPS: usize = 32;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut sizes = vec![1];
    if all > 1 {
        sizes.push(all);
    }
    let core = if cfg!(feature = "parallel") { "rayon" } else { "sequential" };
    sizes
        .into_iter()
        .map(|n| (format!("{core}/{n}-thread"), rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()))
        .collect()
}

fn workloads(c: &mut Criterion) {
    let b = benchmark("jump-lq").unwrap();
    let p = &b.problem;
    let g = b.grid(None).unwrap();
    let u = RelaxedControl::uniform(g, 1.0, STEPS, FeedbackMode::StateFeedback { partition: p.state_partition(8).unwrap() }).unwrap();
    let noise = sample_noise(p, PATHS, STEPS, 1).unwrap();
    let paths = simulate(p, &u, &noise).unwrap();
    let adj = solve_bsde(p, &paths, &u, BasisSpec::default()).unwrap();

    let mut group = c.benchmark_group("jump-lq");
    group.sample_size(10);
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::new("sample_noise", &label), |bch| {
            bch.iter(|| pool.install(|| sample_noise(p, PATHS, STEPS, 1).unwrap()))
        });
        group.bench_function(BenchmarkId::new("simulate", &label), |bch| {
            bch.iter(|| pool.install(|| simulate(p, &u, &noise).unwrap()))
        });
        group.bench_function(BenchmarkId::new("solve_bsde", &label), |bch| {
            bch.iter(|| pool.install(|| solve_bsde(p, &paths, &u, BasisSpec::default()).unwrap()))
        });
        group.bench_function(BenchmarkId::new("hamiltonian_field", &label), |bch| {
            bch.iter(|| pool.install(|| hamiltonian_field(p, &paths, &adj, InfoMode::Full).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, workloads);
criterion_main!(benches);
