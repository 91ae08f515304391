use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use interdomain::config::rng_from_seed;
use interdomain::layer::{backward, decode_step, forward, DecodeState, LayerParams};
use interdomain::{Backend, Mat, ModelConfig, Variant};

fn config(variant: Variant) -> ModelConfig {
    ModelConfig {
        heads: 8,
        model_dim: 256,
        head_dim: 32,
        feature_dim: 32,
        state_dim: 32,
        n_kv: 8,
        chunk_size: 64,
        backend: Backend::Chunkwise,
        output_gate_enabled: true,
        variant,
        ..Default::default()
    }
}

fn pools() -> [(&'static str, rayon::ThreadPool); 2] {
    [
        ("rayon", rayon::ThreadPoolBuilder::new().build().unwrap()),
        ("one_thread", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
    ]
}

fn layer(c: &mut Criterion) {
    let n = 512;
    let mut group = c.benchmark_group("layer_n512");
    group.sample_size(10);
    for v in Variant::ALL {
        let cfg = config(v);
        let mut rng = rng_from_seed(0);
        let p = LayerParams::init(&cfg, &mut rng);
        let x = Mat::random_normal(n, cfg.model_dim, 1.0, &mut rng);
        let g = Mat::random_normal(n, cfg.model_dim, 1.0, &mut rng);
        for (pool_name, pool) in pools() {
            group.bench_with_input(BenchmarkId::new(format!("forward_{}", v.name()), pool_name), &x, |b, x| {
                b.iter(|| pool.install(|| forward(&p, black_box(x), &cfg).unwrap()))
            });
            group.bench_with_input(BenchmarkId::new(format!("backward_{}", v.name()), pool_name), &x, |b, x| {
                b.iter(|| pool.install(|| backward(&p, black_box(x), &g, &cfg).unwrap()))
            });
        }
    }
    group.finish();
}

fn decode(c: &mut Criterion) {
    let cfg = config(Variant::FullInterdomain);
    let mut rng = rng_from_seed(1);
    let p = LayerParams::init(&cfg, &mut rng);
    let token: Vec<f64> = Mat::random_normal(1, cfg.model_dim, 1.0, &mut rng).into_vec();
    c.bench_function("decode_step", |b| {
        let mut state = DecodeState::new(&p);
        b.iter(|| decode_step(&p, &mut state, black_box(&token), &cfg).unwrap())
    });
}

criterion_group!(benches, layer, decode);
criterion_main!(benches);
