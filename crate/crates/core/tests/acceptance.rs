//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always print.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use interdomain::accounting::{count_params, state_dof, BackboneSpec, Mixer};
use interdomain::attention::{feature_attention, AttentionInputs};
use interdomain::basis::{project, readout_nw, DiscreteBasis};
use interdomain::bench::{simulate_decode, BenchPath};
use interdomain::config::{rng_from_seed, substream};
use interdomain::features::{rff_kernel_estimate, sample_gaussian_frequencies, FeatureMap};
use interdomain::layer::{backward, decode_step, forward, prefill, DecodeState, LayerParams};
use interdomain::ssm::{scan, DiagonalSSM};
use interdomain::{Backend, Mat, ModelConfig, Variant};
use rand::Rng;

struct Outcome {
    ok: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

fn outcome(ok: bool, detail: String) -> Outcome {
    Outcome { ok, detail }
}

/// `max|a − b| / max|b|`, with an all-zero reference compared absolutely.
fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Entrywise relative error with a floor for entries near zero.
fn grad_rel(a: &[f64], b: &[f64]) -> f64 {
    let peak = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    let floor = 1e-6 * peak;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

fn complete_basis() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let mut rng = substream(1, i);
        let n = rng.random_range(1..=64);
        let r = rng.random_range(1..=16);
        let d = rng.random_range(1..=16);
        let nq = rng.random_range(1..=8);
        // positive features keep every kernel denominator away from zero
        let inputs = AttentionInputs {
            q: Mat::random_uniform(nq, r, 0.05, 1.0, &mut rng),
            k: Mat::random_uniform(n, r, 0.05, 1.0, &mut rng),
            v: Mat::random_normal(n, d, 1.0, &mut rng),
            causal: false,
        };
        let oracle = feature_attention(&inputs, &FeatureMap::Identity).unwrap();
        for basis in [DiscreteBasis::indicator(n), DiscreteBasis::discrete_legendre(n, n).unwrap()] {
            let state = project(&inputs.k, &inputs.v, &basis).unwrap();
            let out = readout_nw(&inputs.q, &state).unwrap();
            worst = worst.max(rel(out.as_slice(), oracle.as_slice()));
        }
    }
    let t = start.elapsed();
    outcome(worst <= 1e-10 && t < Duration::from_secs(10), format!("max rel {worst:.2e} (tol 1e-10), {:.2}s (limit 10s)", t.as_secs_f64()))
}

fn backend_agreement() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        for n in [1usize, 2, 16, 257, 1024] {
            for m in [1usize, 4, 64] {
                let mut rng = substream(seed, (n * 100 + m) as u64);
                let ssm = DiagonalSSM::init(m, 3, &mut rng);
                let z = Mat::random_normal(n, 3, 1.0, &mut rng);
                let mut runs = vec![(Backend::Sequential, 1), (Backend::Fft, 1), (Backend::ParallelPrefix, 1)];
                runs.extend([1, 16, n].into_iter().filter(|&k| k <= n).map(|k| (Backend::Chunkwise, k)));
                let outs: Vec<Vec<f64>> = runs
                    .iter()
                    .map(|&(b, k)| ssm.readout(&scan(&ssm, &z, b, k, None).unwrap()).as_slice().to_vec())
                    .collect();
                for i in 0..outs.len() {
                    for j in i + 1..outs.len() {
                        worst = worst.max(rel(&outs[i], &outs[j]));
                    }
                }
            }
        }
    }
    let t = start.elapsed();
    outcome(worst <= 1e-8 && t < Duration::from_secs(60), format!("max pairwise rel {worst:.2e} (tol 1e-8), {:.2}s (limit 60s)", t.as_secs_f64()))
}

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        heads: 2,
        model_dim: 8,
        state_dim: 4,
        feature_dim: 4,
        head_dim: 4,
        n_kv: 2,
        variant,
        rope_enabled: true,
        output_gate_enabled: true,
        ..Default::default()
    }
}

fn loss(p: &LayerParams, x: &Mat, g: &Mat, cfg: &ModelConfig) -> f64 {
    let y = forward(p, x, cfg).unwrap();
    y.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum()
}

fn gradients() -> Outcome {
    let h = 1e-5;
    let mut worst_fd: f64 = 0.0;
    let mut worst_k: f64 = 0.0;
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        let cfg = tiny(v);
        let mut rng = rng_from_seed(100 + i as u64);
        let p = LayerParams::randomized(&cfg, &mut rng);
        let x = Mat::random_normal(6, cfg.model_dim, 1.0, &mut rng);
        let g = Mat::random_normal(6, cfg.model_dim, 1.0, &mut rng);
        let k16 = backward(&p, &x, &g, &ModelConfig { chunk_size: 16, ..cfg.clone() }).unwrap();
        let k1 = backward(&p, &x, &g, &ModelConfig { chunk_size: 1, ..cfg.clone() }).unwrap();
        worst_k = worst_k.max(rel(&k1.params.to_flat(), &k16.params.to_flat()));
        worst_k = worst_k.max(rel(k1.x.as_slice(), k16.x.as_slice()));

        let flat = p.to_flat();
        let mut numeric = Vec::with_capacity(flat.len());
        for j in 0..flat.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            let (mut fa, mut fb) = (flat.clone(), flat.clone());
            fa[j] += h;
            fb[j] -= h;
            a.set_flat(&fa).unwrap();
            b.set_flat(&fb).unwrap();
            numeric.push((loss(&a, &x, &g, &cfg) - loss(&b, &x, &g, &cfg)) / (2.0 * h));
        }
        for j in 0..x.as_slice().len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.as_mut_slice()[j] += h;
            b.as_mut_slice()[j] -= h;
            numeric.push((loss(&p, &a, &g, &cfg) - loss(&p, &b, &g, &cfg)) / (2.0 * h));
        }
        let mut analytic = k16.params.to_flat();
        analytic.extend_from_slice(k16.x.as_slice());
        worst_fd = worst_fd.max(grad_rel(&analytic, &numeric));
    }
    outcome(
        worst_fd <= 1e-4 && worst_k <= 1e-9,
        format!("finite differences {worst_fd:.2e} (tol 1e-4), K=1 vs K=16 {worst_k:.2e} (tol 1e-9)"),
    )
}

fn parameter_counts() -> Outcome {
    let s125 = count_params(&BackboneSpec::scale_125m(), Mixer::Softmax);
    let s13 = count_params(&BackboneSpec::scale_1p3b(), Mixer::Softmax);
    let mut band_ok = true;
    let mut bands = Vec::new();
    for b in BackboneSpec::all_scales() {
        let soft = count_params(&b, Mixer::Softmax) as f64;
        let inter = count_params(&b, Mixer::Interdomain(Variant::FullInterdomain)) as f64;
        let overhead = inter / soft - 1.0;
        band_ok &= (0.003..=0.012).contains(&overhead);
        bands.push(format!("{} {:.3}%", b.name, 100.0 * overhead));
    }
    outcome(
        s125 == 134_105_856 && s13 == 1_345_423_360 && band_ok,
        format!("softmax 125M {s125}, 1.3B {s13}; overhead {}", bands.join(", ")),
    )
}

fn state_budget() -> Outcome {
    let cfg = ModelConfig {
        heads: 32,
        n_kv: 32,
        head_dim: 64,
        feature_dim: 64,
        state_dim: 64,
        ..ModelConfig::scale_1p3b()
    };
    let full = state_dof(&cfg);
    let s4d = state_dof(&ModelConfig { variant: Variant::S4dOnly, ..cfg.clone() });
    // two M-mode complex states of width R + d_h per cell, one cell per head
    let oracle_cell = 2 * 64 * (64 + 64);
    outcome(
        full.per_cell_dof == 16_384 && oracle_cell == 16_384 && full.total_dof == 524_288 && s4d.total_dof == full.total_dof,
        format!("per-cell {}, total {}, s4d_only total {}", full.per_cell_dof, full.total_dof, s4d.total_dof),
    )
}

fn prefill_decode() -> Outcome {
    let n = 64;
    let mut worst: f64 = 0.0;
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        for backend in Backend::ALL {
            let cfg = ModelConfig { backend, ..tiny(v) };
            let mut rng = rng_from_seed(200 + i as u64);
            let p = LayerParams::randomized(&cfg, &mut rng);
            let x = Mat::random_normal(n, cfg.model_dim, 1.0, &mut rng);
            let full = forward(&p, &x, &cfg).unwrap();
            let mut st = DecodeState::new(&p);
            let mut rows = Vec::new();
            for t in 0..n {
                rows.extend(decode_step(&p, &mut st, x.row(t), &cfg).unwrap());
            }
            worst = worst.max(rel(&rows, full.as_slice()));
            for c in [1, 8, n] {
                let mut st = DecodeState::new(&p);
                let out = prefill(&p, &x, &cfg, &mut st, c).unwrap();
                worst = worst.max(rel(out.as_slice(), full.as_slice()));
            }
        }
    }
    outcome(worst <= 1e-10, format!("max rel {worst:.2e} (tol 1e-10) over 4 variants x 4 backends"))
}

fn decode_flatness() -> Outcome {
    let cfg = ModelConfig::scale_1p3b();
    let p = LayerParams::init(&cfg, &mut rng_from_seed(5));
    let lens: Vec<usize> = (9..=14).map(|e| 1usize << e).collect();
    let mut inter = Vec::new();
    let mut soft = Vec::new();
    for &l in &lens {
        let rows = simulate_decode(&cfg, &p, 1, l, 4, cfg.prefill_chunk).unwrap();
        for r in rows {
            match r.path {
                BenchPath::Interdomain => inter.push(r.per_step_ops),
                BenchPath::SoftmaxKv => soft.push(r.per_step_ops),
                BenchPath::InterdomainChunked => {}
            }
        }
    }
    let flat = inter.windows(2).all(|w| w[0] == w[1]);
    let rising = soft.windows(2).all(|w| w[0] < w[1]);
    outcome(flat && rising, format!("interdomain {inter:?}, softmax {soft:?}"))
}

fn causality() -> Outcome {
    let n = 24;
    let mut worst_seq: f64 = 0.0;
    let mut worst_other: f64 = 0.0;
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        let base = tiny(v);
        let mut rng = rng_from_seed(300 + i as u64);
        let p = LayerParams::randomized(&base, &mut rng);
        let x = Mat::random_normal(n, base.model_dim, 1.0, &mut rng);
        let refs: Vec<(Backend, Mat)> = Backend::ALL
            .into_iter()
            .map(|b| (b, forward(&p, &x, &ModelConfig { backend: b, ..base.clone() }).unwrap()))
            .collect();
        for _ in 0..50 {
            let cut = rng.random_range(1..n);
            let mut y = x.clone();
            for t in cut..n {
                for c in 0..base.model_dim {
                    y.row_mut(t)[c] += rng.random_range(-3.0..3.0);
                }
            }
            for (b, full) in &refs {
                let out = forward(&p, &y, &ModelConfig { backend: *b, ..base.clone() }).unwrap();
                let a = &out.as_slice()[..cut * base.model_dim];
                let r = &full.as_slice()[..cut * base.model_dim];
                if *b == Backend::Sequential {
                    let diff = a.iter().zip(r).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                    worst_seq = worst_seq.max(diff);
                } else {
                    worst_other = worst_other.max(rel(a, r));
                }
            }
        }
    }
    outcome(
        worst_seq == 0.0 && worst_other <= 1e-12,
        format!("sequential max diff {worst_seq:.2e} (must be 0), other backends rel {worst_other:.2e} (tol 1e-12)"),
    )
}

fn rff_quality() -> Outcome {
    let dim = 4;
    let bandwidth = 1.0;
    let mut rng = rng_from_seed(9);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..10)
        .map(|_| {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            let y: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            (x, y)
        })
        .collect();
    let mut errors = Vec::new();
    for (i, s) in [100usize, 10_000, 1_000_000].into_iter().enumerate() {
        let omega = sample_gaussian_frequencies(s, dim, bandwidth, &mut substream(9, i as u64));
        let err = pairs
            .iter()
            .map(|(x, y)| {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
                let exact = (-sq / (2.0 * bandwidth * bandwidth)).exp();
                (rff_kernel_estimate(x, y, &omega) - exact).abs()
            })
            .fold(0.0, f64::max);
        errors.push(err);
    }
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    outcome(monotone && errors[2] < 0.005, format!("max error by S {} (final tol 0.005)", errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(", ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("complete-basis equality", complete_basis),
        ("backend agreement", backend_agreement),
        ("gradient correctness", gradients),
        ("parameter counts", parameter_counts),
        ("state budget", state_budget),
        ("prefill/decode consistency", prefill_decode),
        ("decode flatness", decode_flatness),
        ("causality", causality),
        ("rff quality", rff_quality),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        failed += usize::from(!o.ok);
        println!("{} {}. {name}: {}", if o.ok { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
