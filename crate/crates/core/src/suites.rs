//! Self-checking suites behind the command-line tool.
//!
//! Every suite is deterministic for a given config and seed: case order is
//! fixed, parallel work is merged in index order and no timings are
//! recorded, so two runs produce byte-identical reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::accounting::{count_params, state_dof, BackboneSpec, Mixer};
use crate::attention::feature_attention_from_features;
use crate::basis::{project, readout_nw, DiscreteBasis};
use crate::bench::{run_grid, simulate_prefill, BenchPath, BenchRow};
use crate::config::{substream, Backend, ModelConfig, Variant};
use crate::error::Result;
use crate::layer::{backward, decode_step, forward, prefill, DecodeState, LayerParams};
use crate::linalg::{dot, grad_rel_error, rel_error, Mat};
use crate::par;
use crate::ssm::{scan, DiagonalSSM};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CaseResult {
    /// Passes when `max_error <= tolerance`.
    pub fn within(name: impl Into<String>, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }

    /// An exact integer comparison, reported as `|observed − expected|`.
    pub fn exact(name: impl Into<String>, observed: u64, expected: u64) -> Self {
        Self::within(name, observed.abs_diff(expected) as f64, 0.0)
    }

    /// A boolean property; error 1 when it fails.
    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self::within(name, if ok { 0.0 } else { 1.0 }, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub cases_run: usize,
    pub cases_passed: usize,
    pub verdict: &'static str,
    pub cases: Vec<CaseResult>,
    /// Named quantities worth printing alongside the verdict.
    pub values: BTreeMap<String, f64>,
}

impl SuiteReport {
    pub fn new(suite: &str, cases: Vec<CaseResult>, values: BTreeMap<String, f64>) -> Self {
        let passed = cases.iter().filter(|c| c.passed).count();
        let ok = !cases.is_empty() && passed == cases.len();
        Self {
            suite: suite.to_string(),
            cases_run: cases.len(),
            cases_passed: passed,
            verdict: if ok { "pass" } else { "fail" },
            cases,
            values,
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict == "pass"
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let width = self.cases.iter().map(|c| c.name.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let _ = writeln!(s, "suite {}: {}/{} passed [{}]", self.suite, self.cases_passed, self.cases_run, self.verdict);
        for (k, v) in &self.values {
            let _ = writeln!(s, "  {k} = {v}");
        }
        let _ = writeln!(s, "  {:<width$}  {:>12}  {:>12}  result", "case", "max_error", "tolerance");
        for c in &self.cases {
            let _ = writeln!(
                s,
                "  {:<width$}  {:>12.3e}  {:>12.3e}  {}",
                c.name,
                c.max_error,
                c.tolerance,
                if c.passed { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

fn backend_case(n: usize, m: usize, seed: u64) -> Result<CaseResult> {
    let w = 3;
    let ssm = DiagonalSSM::init(m, w, &mut substream(seed, (m * 7919 + w) as u64));
    let mut rng = substream(seed, (n * 131 + m) as u64);
    let z = Mat::random_normal(n, w, 1.0, &mut rng);
    let reference = ssm.readout(&scan(&ssm, &z, Backend::Sequential, 1, None)?);
    let mut worst: f64 = 0.0;
    let mut runs = vec![(Backend::Fft, 1), (Backend::ParallelPrefix, 1)];
    // chunk sizes beyond N are outside the chunkwise domain
    for k in [1, 16, n].into_iter().filter(|&k| k <= n) {
        runs.push((Backend::Chunkwise, k));
    }
    for (backend, k) in runs {
        let y = ssm.readout(&scan(&ssm, &z, backend, k, None)?);
        worst = worst.max(rel_error(y.as_slice(), reference.as_slice()));
    }
    Ok(CaseResult::within(format!("scan n={n} m={m} seed={seed}"), worst, 1e-8))
}

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        output_gate_enabled: true,
        ..Default::default()
    }
}

fn decode_case(cfg: &ModelConfig, seed: u64) -> Result<CaseResult> {
    let n = 64;
    let mut rng = substream(seed, 17);
    let params = LayerParams::randomized(cfg, &mut rng);
    let x = Mat::random_normal(n, cfg.model_dim, 1.0, &mut rng);
    let full = forward(&params, &x, cfg)?;
    let mut worst: f64 = 0.0;
    let mut state = DecodeState::new(&params);
    let mut stepped = Vec::with_capacity(n * cfg.model_dim);
    for t in 0..n {
        stepped.extend(decode_step(&params, &mut state, x.row(t), cfg)?);
    }
    worst = worst.max(rel_error(&stepped, full.as_slice()));
    for c in [1, 8, n] {
        let mut state = DecodeState::new(&params);
        let out = prefill(&params, &x, cfg, &mut state, c)?;
        worst = worst.max(rel_error(out.as_slice(), full.as_slice()));
    }
    Ok(CaseResult::within(format!("decode {}", cfg.variant.name()), worst, 1e-10))
}

fn complete_basis_case(instances: usize, seed: u64) -> Result<CaseResult> {
    let errs = par::map_range(instances, |i| -> Result<f64> {
        let mut rng = substream(seed, 1000 + i as u64);
        let n = 1 + (i * 37 + seed as usize) % 64;
        let r = 1 + (i * 11) % 16;
        let d = 1 + (i * 5) % 16;
        let fk = Mat::random_uniform(n, r, 0.05, 1.0, &mut rng);
        let fq = Mat::random_uniform(1 + i % 8, r, 0.05, 1.0, &mut rng);
        let v = Mat::random_normal(n, d, 1.0, &mut rng);
        let oracle = feature_attention_from_features(&fq, &fk, &v, false)?;
        let mut worst: f64 = 0.0;
        for basis in [DiscreteBasis::indicator(n), DiscreteBasis::discrete_legendre(n, n)?] {
            let out = readout_nw(&fq, &project(&fk, &v, &basis)?)?;
            worst = worst.max(rel_error(out.as_slice(), oracle.as_slice()));
        }
        Ok(worst)
    });
    let mut worst: f64 = 0.0;
    for e in errs {
        worst = worst.max(e?);
    }
    Ok(CaseResult::within(format!("complete basis x{instances}"), worst, 1e-10))
}

/// Backend agreement, complete-basis equality and prefill/decode consistency.
pub fn equiv(seed: u64) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for n in [1, 2, 16, 257, 1024] {
        for m in [1, 4, 64] {
            cases.push(backend_case(n, m, seed)?);
        }
    }
    cases.push(complete_basis_case(20, seed)?);
    for v in Variant::ALL {
        cases.push(decode_case(&tiny(v), seed)?);
    }
    Ok(SuiteReport::new("equiv", cases, BTreeMap::new()))
}

fn layer_loss(p: &LayerParams, x: &Mat, g: &Mat, cfg: &ModelConfig) -> Result<f64> {
    Ok(dot(forward(p, x, cfg)?.as_slice(), g.as_slice()))
}

/// Central differences of `Σ g ⊙ forward(x)` against the analytic backward,
/// plus agreement of checkpoint intervals 1 and 16.
fn gradcheck_variant(cfg: &ModelConfig, seed: u64) -> Result<Vec<CaseResult>> {
    let n = 6;
    let h = 1e-5;
    let mut rng = substream(seed, 23);
    let p = LayerParams::randomized(cfg, &mut rng);
    let x = Mat::random_normal(n, cfg.model_dim, 1.0, &mut rng);
    let g = Mat::random_normal(n, cfg.model_dim, 1.0, &mut rng);
    let grads = backward(&p, &x, &g, cfg)?;

    let flat = p.to_flat();
    let numeric = par::map_range(flat.len(), |i| -> Result<f64> {
        let (mut a, mut b) = (p.clone(), p.clone());
        let (mut fa, mut fb) = (flat.clone(), flat.clone());
        fa[i] += h;
        fb[i] -= h;
        a.set_flat(&fa)?;
        b.set_flat(&fb)?;
        Ok((layer_loss(&a, &x, &g, cfg)? - layer_loss(&b, &x, &g, cfg)?) / (2.0 * h))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let numeric_x = par::map_range(x.as_slice().len(), |i| -> Result<f64> {
        let (mut a, mut b) = (x.clone(), x.clone());
        a.as_mut_slice()[i] += h;
        b.as_mut_slice()[i] -= h;
        Ok((layer_loss(&p, &a, &g, cfg)? - layer_loss(&p, &b, &g, cfg)?) / (2.0 * h))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let name = cfg.variant.name();
    let mut analytic = grads.params.to_flat();
    analytic.extend_from_slice(grads.x.as_slice());
    let mut fd = numeric;
    fd.extend(numeric_x);

    let k1 = backward(&p, &x, &g, &ModelConfig { chunk_size: 1, ..cfg.clone() })?;
    let k16 = backward(&p, &x, &g, &ModelConfig { chunk_size: 16, ..cfg.clone() })?;
    let ka = k1.params.to_flat();
    let kb = k16.params.to_flat();
    Ok(vec![
        CaseResult::within(format!("fd {name}"), grad_rel_error(&analytic, &fd), 1e-4),
        CaseResult::within(format!("k1 vs k16 {name}"), rel_error(&ka, &kb), 1e-9),
    ])
}

pub fn gradcheck(seed: u64) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for v in Variant::ALL {
        cases.extend(gradcheck_variant(&tiny(v), seed)?);
    }
    Ok(SuiteReport::new("gradcheck", cases, BTreeMap::new()))
}

/// State degrees of freedom for `cfg`, the iso-state check against the
/// S4D-only variant, and backbone parameter counts.
pub fn budget(cfg: &ModelConfig) -> Result<SuiteReport> {
    crate::config::validate(cfg.clone())?;
    let b = state_dof(cfg);
    let expected_cell = 2 * (cfg.feature_dim + cfg.head_dim) * cfg.state_dim;
    let s4d = state_dof(&ModelConfig {
        variant: Variant::S4dOnly,
        ..cfg.clone()
    });
    let mut values = BTreeMap::new();
    values.insert("per_cell_dof".to_string(), b.per_cell_dof as f64);
    values.insert("total_dof".to_string(), b.total_dof as f64);
    let mut cases = vec![
        CaseResult::exact("per-cell dof", b.per_cell_dof as u64, expected_cell as u64),
        CaseResult::exact("total dof", b.total_dof as u64, (cfg.n_kv * expected_cell) as u64),
        CaseResult::exact("iso-state vs s4d_only", s4d.total_dof as u64, b.total_dof as u64),
        CaseResult::exact("softmax params 125M", count_params(&BackboneSpec::scale_125m(), Mixer::Softmax) as u64, 134_105_856),
        CaseResult::exact("softmax params 1.3B", count_params(&BackboneSpec::scale_1p3b(), Mixer::Softmax) as u64, 1_345_423_360),
    ];
    for backbone in BackboneSpec::all_scales() {
        let soft = count_params(&backbone, Mixer::Softmax) as f64;
        let inter = count_params(&backbone, Mixer::Interdomain(Variant::FullInterdomain)) as f64;
        let overhead = inter / soft - 1.0;
        // distance outside the 0.3–1.2% band
        let outside = (0.003 - overhead).max(overhead - 0.012).max(0.0);
        values.insert(format!("overhead {}", backbone.name), overhead);
        cases.push(CaseResult::within(format!("overhead band {}", backbone.name), outside, 0.0));
    }
    Ok(SuiteReport::new("budget", cases, values))
}

/// Bench grid plus its structural checks. Returns the rows for CSV output.
pub fn bench(cfg: &ModelConfig, batches: &[usize], prefix_lens: &[usize], steps: usize, chunk: usize) -> Result<(SuiteReport, Vec<BenchRow>)> {
    let rows = run_grid(cfg, batches, prefix_lens, steps, chunk)?;
    let mut cases = Vec::new();
    for &b in batches {
        let series = |path: BenchPath| -> Vec<&BenchRow> { rows.iter().filter(|r| r.path == path && r.batch == b).collect() };
        let inter = series(BenchPath::Interdomain);
        let flat = inter.windows(2).all(|w| w[0].per_step_ops == w[1].per_step_ops);
        cases.push(CaseResult::holds(format!("interdomain flat B={b}"), flat));
        let soft = series(BenchPath::SoftmaxKv);
        let rising = steps == 0 || soft.windows(2).all(|w| w[0].prefix_len == w[1].prefix_len || w[0].per_step_ops < w[1].per_step_ops);
        cases.push(CaseResult::holds(format!("softmax increasing B={b}"), rising));
        for &l in prefix_lens {
            let c = chunk.clamp(1, l.max(1));
            let p = simulate_prefill(cfg, b, l.max(1), c)?;
            cases.push(CaseResult::holds(format!("chunked <= full B={b} L={l}"), p.chunked_peak <= p.full_peak));
        }
    }
    let mut values = BTreeMap::new();
    values.insert("rows".to_string(), rows.len() as f64);
    Ok((SuiteReport::new("bench", cases, values), rows))
}

/// Complete-basis equality on random instances, and orthonormality of the
/// discrete Legendre bases used.
pub fn basis(seed: u64) -> Result<SuiteReport> {
    let mut cases = vec![complete_basis_case(100, seed)?];
    for n in [1, 8, 64] {
        let b = DiscreteBasis::discrete_legendre(n, n)?;
        cases.push(CaseResult::within(format!("legendre orthonormal n={n}"), b.orthonormality_error(), 1e-10));
    }
    Ok(SuiteReport::new("basis", cases, BTreeMap::new()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_verdicts() {
        let ok = SuiteReport::new("x", vec![CaseResult::within("a", 0.0, 1e-9)], BTreeMap::new());
        assert!(ok.passed());
        let bad = SuiteReport::new("x", vec![CaseResult::within("a", 1.0, 1e-9), CaseResult::holds("b", true)], BTreeMap::new());
        assert!(!bad.passed());
        assert_eq!(bad.cases_passed, 1);
        assert!(!SuiteReport::new("x", vec![], BTreeMap::new()).passed());
        assert!(bad.to_table().contains("FAIL"));
    }

    #[test]
    fn budget_at_1p3b() {
        let r = budget(&ModelConfig::scale_1p3b()).unwrap();
        assert!(r.passed(), "{}", r.to_table());
        assert_eq!(r.values["total_dof"], 524_288.0);
    }

    #[test]
    fn basis_and_gradcheck_pass() {
        assert!(basis(3).unwrap().passed());
        let r = gradcheck(3).unwrap();
        assert!(r.passed(), "{}", r.to_table());
    }
}
