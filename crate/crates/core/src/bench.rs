//! Operation-counting decode and prefill simulation.
//!
//! Nothing here measures time. The interdomain path executes real
//! [`decode_step`] calls and tallies the multiply-adds and state traffic of
//! each executed step from the tensor shapes it touched; the softmax path is
//! counted analytically from its growing KV cache. Memory is a count of live
//! `f64` values.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{substream, ModelConfig, CONV_TAPS};
use crate::error::{shape_err, Result};
use crate::layer::{decode_step, out_width, DecodeState, LayerParams};
use crate::par;

/// Running totals for one simulated run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCounter {
    pub multiply_adds: u64,
    pub state_reads: u64,
    pub state_writes: u64,
    pub peak_live_values: u64,
}

impl OpCounter {
    pub fn add_macs(&mut self, n: u64) {
        self.multiply_adds += n;
    }

    pub fn read(&mut self, n: u64) {
        self.state_reads += n;
    }

    pub fn write(&mut self, n: u64) {
        self.state_writes += n;
    }

    pub fn observe_live(&mut self, n: u64) {
        self.peak_live_values = self.peak_live_values.max(n);
    }

    /// Arithmetic plus state traffic.
    pub fn ops(&self) -> u64 {
        self.multiply_adds + self.state_reads + self.state_writes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchPath {
    SoftmaxKv,
    Interdomain,
    InterdomainChunked,
}

/// One `(path, B, L)` cell; serialized with the CSV header
/// `path,B,L,steps,per_step_ops,peak_memory_units`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRow {
    pub path: BenchPath,
    #[serde(rename = "B")]
    pub batch: usize,
    #[serde(rename = "L")]
    pub prefix_len: usize,
    pub steps: usize,
    pub per_step_ops: u64,
    pub peak_memory_units: u64,
}

/// Tally one executed decode step of one sequence.
fn count_decode_step(params: &LayerParams, state: &DecodeState, cfg: &ModelConfig, c: &mut OpCounter) {
    let d = cfg.model_dim as u64;
    let qw = params.w_q.as_ref().map_or(0, |w| w.cols()) as u64;
    let kw = params.w_k.cols() as u64;
    let vw = params.w_v.cols() as u64;
    let vconv = params.conv_v.as_ref().map_or(0, |k| k.cols()) as u64;
    let taps = CONV_TAPS as u64;
    let (m, w, r, dh) = (cfg.state_dim as u64, cfg.input_width() as u64, cfg.feature_dim as u64, cfg.head_dim as u64);
    let cells = state.ssm.len() as u64;
    let p = out_width(cfg) as u64;

    c.add_macs(d * (qw + kw + vw));
    c.add_macs(taps * (qw + kw + vconv));
    c.read((taps - 1) * (qw + kw + vconv));
    c.write((taps - 1) * (qw + kw + vconv));
    if cfg.rope_enabled {
        c.add_macs(2 * (qw + kw));
    }
    let feature_width = qw + if cfg.variant.dual_kv() { kw } else { 0 };
    c.add_macs(2 * feature_width);
    c.add_macs(2 * cells * w);
    // complex state update Λx + Bz: 4 real MACs for Λx, 2 for Bz
    c.add_macs(6 * cells * m * w);
    c.read(2 * cells * m * w);
    c.write(2 * cells * m * w);
    // Re(C x): 2 real MACs per complex product
    c.add_macs(2 * cells * m * m * w);
    if cfg.variant.has_query() {
        c.add_macs(cfg.heads as u64 * m * (r + dh));
    } else {
        c.add_macs(cells * m * w);
    }
    if params.w_g.is_some() {
        c.add_macs(d * p + p);
    }
    c.add_macs(p * d);
}

/// Softmax decode step `s` after a prefix of `l`: four `d × d` projections,
/// scores and weighted sum over `l + s + 1` cached keys and values.
fn softmax_step(cfg: &ModelConfig, l: usize, s: usize, c: &mut OpCounter) {
    let d = cfg.model_dim as u64;
    let keys = (l + s + 1) as u64;
    c.add_macs(4 * d * d + 2 * d * keys);
    c.read(2 * d * (l + s) as u64);
    c.write(2 * d);
}

/// Live values per token of a layer forward without cache: projected
/// streams, features, SSM inputs, materialized complex states, readouts and
/// outputs.
pub fn interdomain_activation_per_token(cfg: &ModelConfig) -> u64 {
    let (h, r, dh, m, kv, d) = (cfg.heads, cfg.feature_dim, cfg.head_dim, cfg.state_dim, cfg.n_kv, cfg.model_dim);
    let w = cfg.input_width();
    let q = if cfg.variant.has_query() { 3 * h * r } else { 0 };
    let k = 3 * kv * r;
    let v = 2 * kv * dh;
    let z = kv * w;
    let states = 2 * kv * m * w;
    let y = kv * m * w;
    let o = out_width(cfg);
    (q + k + v + z + states + y + o + d) as u64
}

fn softmax_activation_per_token(cfg: &ModelConfig) -> u64 {
    4 * cfg.model_dim as u64
}

/// Fixed recurrent state of one sequence, in live values.
pub fn interdomain_state_values(params: &LayerParams) -> u64 {
    DecodeState::new(params).live_values() as u64
}

/// Peak memory of prefilling `l` tokens for `batch` sequences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PrefillReport {
    pub chunk: usize,
    pub state_term: u64,
    pub chunked_activation_term: u64,
    pub full_activation_term: u64,
    pub chunked_peak: u64,
    pub full_peak: u64,
}

/// Chunked prefill holds one chunk of activations plus the running state;
/// a whole-sequence prefill holds all `l` tokens of activations.
pub fn simulate_prefill(cfg: &ModelConfig, batch: usize, l: usize, chunk: usize) -> Result<PrefillReport> {
    if chunk == 0 || chunk > l {
        return Err(shape_err("prefill chunk", format!("1..={l}"), chunk));
    }
    let params = LayerParams::zeros(cfg);
    let b = batch as u64;
    let a = interdomain_activation_per_token(cfg);
    let state_term = b * interdomain_state_values(&params);
    let chunked = b * chunk as u64 * a;
    let full = b * l as u64 * a;
    Ok(PrefillReport {
        chunk,
        state_term,
        chunked_activation_term: chunked,
        full_activation_term: full,
        chunked_peak: state_term + chunked,
        full_peak: state_term + full,
    })
}

/// Rows for the three paths at one `(B, L)`: `steps` decode steps after a
/// prefix of `l`. The interdomain session is positioned at `l` directly,
/// since its per-step work cannot depend on what the state holds.
pub fn simulate_decode(cfg: &ModelConfig, params: &LayerParams, batch: usize, l: usize, steps: usize, chunk: usize) -> Result<Vec<BenchRow>> {
    params.check(cfg)?;
    let b = batch as u64;
    let per_step = |total: u64| if steps == 0 { 0 } else { total / steps as u64 };

    let mut soft = OpCounter::default();
    for s in 0..steps {
        softmax_step(cfg, l, s, &mut soft);
    }
    let kv_end = 2 * cfg.model_dim as u64 * (l + steps) as u64;
    soft.observe_live(b * (kv_end + l as u64 * softmax_activation_per_token(cfg)));

    let mut inter = OpCounter::default();
    let mut state = DecodeState::new(params);
    state.position = l;
    let mut rng = substream(cfg.seed, l as u64);
    for _ in 0..steps {
        let token: Vec<f64> = (0..cfg.model_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        count_decode_step(params, &state, cfg, &mut inter);
        decode_step(params, &mut state, &token, cfg)?;
    }
    let pre = simulate_prefill(cfg, batch, l.max(1), chunk.clamp(1, l.max(1)))?;

    Ok(vec![
        BenchRow {
            path: BenchPath::SoftmaxKv,
            batch,
            prefix_len: l,
            steps,
            per_step_ops: b * per_step(soft.ops()),
            peak_memory_units: soft.peak_live_values,
        },
        BenchRow {
            path: BenchPath::Interdomain,
            batch,
            prefix_len: l,
            steps,
            per_step_ops: b * per_step(inter.ops()),
            peak_memory_units: pre.full_peak,
        },
        BenchRow {
            path: BenchPath::InterdomainChunked,
            batch,
            prefix_len: l,
            steps,
            per_step_ops: b * per_step(inter.ops()),
            peak_memory_units: pre.chunked_peak,
        },
    ])
}

/// Every `(B, L)` combination, simulated in parallel and sorted by
/// `(path, B, L)`.
pub fn run_grid(cfg: &ModelConfig, batches: &[usize], prefix_lens: &[usize], steps: usize, chunk: usize) -> Result<Vec<BenchRow>> {
    let params = LayerParams::init(cfg, &mut substream(cfg.seed, u64::MAX));
    let cells: Vec<(usize, usize)> = batches.iter().flat_map(|&b| prefix_lens.iter().map(move |&l| (b, l))).collect();
    let results = par::map_slice(&cells, |&(b, l)| simulate_decode(cfg, &params, b, l, steps, chunk));
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    rows.sort_by_key(|r| (r.path, r.batch, r.prefix_len));
    Ok(rows)
}

pub fn write_csv<W: std::io::Write>(rows: &[BenchRow], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(["path", "B", "L", "steps", "per_step_ops", "peak_memory_units"])?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn emit_csv(rows: &[BenchRow], path: impl AsRef<Path>) -> Result<()> {
    write_csv(rows, std::fs::File::create(path)?)
}

pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<BenchRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rd.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn parse_csv(path: impl AsRef<Path>) -> Result<Vec<BenchRow>> {
    read_csv(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{rng_from_seed, Variant};

    fn small() -> ModelConfig {
        ModelConfig {
            heads: 4,
            model_dim: 32,
            head_dim: 8,
            feature_dim: 8,
            state_dim: 8,
            n_kv: 4,
            ..Default::default()
        }
    }

    fn row(rows: &[BenchRow], path: BenchPath) -> &BenchRow {
        rows.iter().find(|r| r.path == path).unwrap()
    }

    #[test]
    fn interdomain_ops_flat_in_prefix() {
        let cfg = small();
        let p = LayerParams::init(&cfg, &mut rng_from_seed(0));
        let a = simulate_decode(&cfg, &p, 1, 512, 8, 64).unwrap();
        let b = simulate_decode(&cfg, &p, 1, 16_384, 8, 64).unwrap();
        assert_eq!(row(&a, BenchPath::Interdomain).per_step_ops, row(&b, BenchPath::Interdomain).per_step_ops);
        let (s1, s2) = (row(&a, BenchPath::SoftmaxKv).per_step_ops, row(&b, BenchPath::SoftmaxKv).per_step_ops);
        assert!(s2 > s1);
    }

    #[test]
    fn softmax_affine_in_prefix() {
        let cfg = small();
        let p = LayerParams::init(&cfg, &mut rng_from_seed(0));
        let ops = |l| row(&simulate_decode(&cfg, &p, 1, l, 4, 1).unwrap(), BenchPath::SoftmaxKv).per_step_ops as i64;
        let (a, b, c) = (ops(1000), ops(2000), ops(3000));
        assert_eq!(b - a, c - b);
        assert!(b > a);
        // KV term dominates at long prefixes: doubling L nearly doubles the step
        let (x, y) = (ops(100_000) as f64, ops(200_000) as f64);
        assert!((y / x - 2.0).abs() < 0.05);
    }

    #[test]
    fn zero_steps_zero_decode_ops() {
        let cfg = small();
        let p = LayerParams::init(&cfg, &mut rng_from_seed(0));
        let rows = simulate_decode(&cfg, &p, 2, 128, 0, 16).unwrap();
        assert!(rows.iter().all(|r| r.per_step_ops == 0 && r.peak_memory_units > 0));
    }

    #[test]
    fn prefill_memory_terms() {
        let cfg = small();
        let full = simulate_prefill(&cfg, 2, 512, 512).unwrap();
        assert_eq!(full.chunked_peak, full.full_peak);
        let eighth = simulate_prefill(&cfg, 2, 512, 64).unwrap();
        assert_eq!(eighth.full_activation_term, 8 * eighth.chunked_activation_term);
        assert_eq!(eighth.state_term, full.state_term);
        assert!(eighth.chunked_peak < eighth.full_peak);
        assert!(simulate_prefill(&cfg, 1, 10, 11).is_err());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let cfg = ModelConfig {
            variant: Variant::S4dOnly,
            ..small()
        };
        let rows = run_grid(&cfg, &[1, 4], &[64, 256], 3, 32).unwrap();
        assert_eq!(rows.len(), 12);
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        assert!(buf.starts_with(b"path,B,L,steps,per_step_ops,peak_memory_units\n"));
        assert_eq!(read_csv(buf.as_slice()).unwrap(), rows);
        let mut again = Vec::new();
        write_csv(&run_grid(&cfg, &[1, 4], &[64, 256], 3, 32).unwrap(), &mut again).unwrap();
        assert_eq!(buf, again);
        let mut empty = Vec::new();
        write_csv(&[], &mut empty).unwrap();
        assert_eq!(empty, b"path,B,L,steps,per_step_ops,peak_memory_units\n");
        assert!(read_csv(empty.as_slice()).unwrap().is_empty());
    }
}
