use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use interdomain::config::rng_from_seed;
use interdomain::ssm::{backward_checkpointed, scan, DiagonalSSM, OutputSeq};
use interdomain::{Backend, Mat};

fn pools() -> [(&'static str, rayon::ThreadPool); 2] {
    [
        ("rayon", rayon::ThreadPoolBuilder::new().build().unwrap()),
        ("one_thread", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
    ]
}

fn scans(c: &mut Criterion) {
    let (n, m, w) = (4096, 64, 8);
    let mut rng = rng_from_seed(0);
    let ssm = DiagonalSSM::init(m, w, &mut rng);
    let z = Mat::random_normal(n, w, 1.0, &mut rng);
    let mut group = c.benchmark_group("scan_n4096_m64");
    group.sample_size(10);
    for (pool_name, pool) in pools() {
        for backend in Backend::ALL {
            group.bench_with_input(BenchmarkId::new(backend.name(), pool_name), &backend, |b, &backend| {
                b.iter(|| pool.install(|| scan(&ssm, black_box(&z), backend, 64, None).unwrap()))
            });
        }
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let (n, m, w) = (2048, 32, 8);
    let mut rng = rng_from_seed(1);
    let ssm = DiagonalSSM::init(m, w, &mut rng);
    let z = Mat::random_normal(n, w, 1.0, &mut rng);
    let mut upstream = OutputSeq::zeros(n, m, w);
    for (i, v) in upstream.as_mut_slice().iter_mut().enumerate() {
        *v = ((i % 17) as f64 - 8.0) / 8.0;
    }
    let mut group = c.benchmark_group("backward_n2048_m32");
    group.sample_size(10);
    for (pool_name, pool) in pools() {
        for k in [16, 64, 256] {
            group.bench_with_input(BenchmarkId::new(format!("k{k}"), pool_name), &k, |b, &k| {
                b.iter(|| pool.install(|| backward_checkpointed(&ssm, black_box(&z), &upstream, k).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, scans, backward);
criterion_main!(benches);
