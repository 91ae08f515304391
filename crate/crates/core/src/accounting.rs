//! Closed-form accounting: recurrent state size, parameter counts and the
//! per-head cost model.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::{Backend, ModelConfig, Variant, CONV_TAPS};
use crate::layer::out_width;

/// Recurrent state, in real degrees of freedom (a complex entry counts as 2).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StateBudget {
    pub cells: usize,
    pub per_cell_dof: usize,
    pub total_dof: usize,
    /// Softmax only: cache entries added per token per layer.
    pub kv_cache_per_token: Option<usize>,
}

/// Fixed-size state of the interdomain and S4D layers: one complex
/// `M × (R + d_h)` state per cell.
pub fn state_dof(cfg: &ModelConfig) -> StateBudget {
    let per_cell = 2 * (cfg.feature_dim + cfg.head_dim) * cfg.state_dim;
    StateBudget {
        cells: cfg.n_kv,
        per_cell_dof: per_cell,
        total_dof: cfg.n_kv * per_cell,
        kv_cache_per_token: None,
    }
}

/// Softmax KV cache after `context` tokens: keys and values of every head.
pub fn softmax_state_dof(cfg: &ModelConfig, context: usize) -> StateBudget {
    let per_token = 2 * cfg.heads * cfg.head_dim;
    StateBudget {
        cells: context,
        per_cell_dof: per_token,
        total_dof: context * per_token,
        kv_cache_per_token: Some(per_token),
    }
}

/// Token mixer used in every layer of a backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Mixer {
    Softmax,
    Interdomain(Variant),
}

/// Shape of a decoder-only language model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BackboneSpec {
    pub name: &'static str,
    pub model_dim: usize,
    pub layers: usize,
    pub vocab: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub feature_dim: usize,
    pub state_dim: usize,
}

impl BackboneSpec {
    fn scale(name: &'static str, model_dim: usize, layers: usize, heads: usize) -> Self {
        let head_dim = model_dim / heads;
        Self {
            name,
            model_dim,
            layers,
            vocab: 32_000,
            heads,
            head_dim,
            feature_dim: head_dim,
            state_dim: 64,
        }
    }

    pub fn scale_125m() -> Self {
        Self::scale("125M", 768, 12, 12)
    }

    pub fn scale_350m() -> Self {
        Self::scale("350M", 1024, 24, 16)
    }

    pub fn scale_760m() -> Self {
        Self::scale("760M", 1536, 24, 16)
    }

    pub fn scale_1p3b() -> Self {
        Self::scale("1.3B", 2048, 24, 32)
    }

    pub fn all_scales() -> [Self; 4] {
        [Self::scale_125m(), Self::scale_350m(), Self::scale_760m(), Self::scale_1p3b()]
    }

    /// SwiGLU hidden width: `(2/3)·4d` rounded up to a multiple of 128.
    pub fn ffn_hidden(&self) -> usize {
        (8 * self.model_dim).div_ceil(3 * 128) * 128
    }

    /// Mixer config of one layer (per-head cells, no gate).
    pub fn layer_config(&self, variant: Variant) -> ModelConfig {
        ModelConfig {
            heads: self.heads,
            model_dim: self.model_dim,
            head_dim: self.head_dim,
            feature_dim: self.feature_dim,
            state_dim: self.state_dim,
            n_kv: self.heads,
            variant,
            output_gate_enabled: false,
            ..ModelConfig::scale_1p3b()
        }
    }
}

/// Trainable parameters of one mixer layer, matching the tensors of
/// [`LayerParams`](crate::layer::LayerParams) for the same config.
pub fn mixer_params(cfg: &ModelConfig) -> usize {
    let (d, h, r, dh, m, kv) = (cfg.model_dim, cfg.heads, cfg.feature_dim, cfg.head_dim, cfg.state_dim, cfg.n_kv);
    let p = out_width(cfg);
    let mut n = d * kv * r + d * kv * dh + p * d + CONV_TAPS * kv * r;
    if cfg.variant.has_query() {
        n += d * h * r + CONV_TAPS * h * r;
    }
    if !cfg.variant.dual_kv() {
        n += CONV_TAPS * kv * dh;
    }
    if cfg.output_gate_enabled {
        n += d * p;
    }
    let ssm = m + m + m + 2 * m + 2 * m * m;
    let norms = 2 * r + 2 * dh;
    let contraction = if cfg.variant.has_query() { 0 } else { m };
    n + kv * (ssm + norms + contraction)
}

/// Total trainable parameters: untied input and output embeddings, two
/// RMSNorm gains per layer, a final RMSNorm, SwiGLU feedforward and the mixer.
pub fn count_params(backbone: &BackboneSpec, mixer: Mixer) -> usize {
    let d = backbone.model_dim;
    let mixer_count = match mixer {
        Mixer::Softmax => 4 * d * d,
        Mixer::Interdomain(v) => mixer_params(&backbone.layer_config(v)),
    };
    let per_layer = mixer_count + 3 * d * backbone.ffn_hidden() + 2 * d;
    backbone.layers * per_layer + 2 * backbone.vocab * d + d
}

/// Which row of the per-head complexity table to instantiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CostRow {
    Softmax,
    InterdomainFft,
    InterdomainScan,
}

impl CostRow {
    pub fn for_backend(backend: Backend) -> Self {
        match backend {
            Backend::Fft => CostRow::InterdomainFft,
            _ => CostRow::InterdomainScan,
        }
    }
}

/// Named per-head cost terms with unit constants.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub row: CostRow,
    pub total_work: BTreeMap<String, f64>,
    pub state_memory: BTreeMap<String, f64>,
    pub backward_memory: BTreeMap<String, f64>,
    /// Per generated token; for the interdomain rows both readout forms.
    pub decode_step: BTreeMap<String, f64>,
}

fn sum(m: &BTreeMap<String, f64>) -> f64 {
    m.values().sum()
}

impl CostReport {
    pub fn total_work_sum(&self) -> f64 {
        sum(&self.total_work)
    }

    pub fn state_memory_sum(&self) -> f64 {
        sum(&self.state_memory)
    }

    pub fn backward_memory_sum(&self) -> f64 {
        sum(&self.backward_memory)
    }
}

/// Instantiate one table row at key/value length `n` and query length `n_q`.
/// `d` is the head dimension and `K` the config's chunk size.
pub fn cost_model(cfg: &ModelConfig, n: usize, n_q: usize, row: CostRow) -> CostReport {
    let (nf, nq) = (n as f64, n_q as f64);
    let (r, d, m, k) = (cfg.feature_dim as f64, cfg.head_dim as f64, cfg.state_dim as f64, cfg.chunk_size as f64);
    let map = |items: &[(&str, f64)]| items.iter().map(|(a, b)| (a.to_string(), *b)).collect::<BTreeMap<_, _>>();
    let rd = r + d;
    match row {
        CostRow::Softmax => CostReport {
            row,
            total_work: map(&[("N_q*N*d", nq * nf * d)]),
            state_memory: map(&[("N*d", nf * d)]),
            backward_memory: map(&[("N_q*N", nq * nf)]),
            decode_step: map(&[("N*d", nf * d)]),
        },
        CostRow::InterdomainFft => CostReport {
            row,
            total_work: map(&[("N*M*(R+d)*log N", nf * m * rd * nf.max(2.0).log2()), ("N_q*R*d", nq * r * d)]),
            state_memory: map(&[("M*(R+d)", m * rd)]),
            backward_memory: map(&[("N*M*(R+d)", nf * m * rd), ("N_q*R", nq * r)]),
            decode_step: map(&[("M^2*(R+d)", m * m * rd), ("M*(R+d) diagonal C", m * rd)]),
        },
        CostRow::InterdomainScan => CostReport {
            row,
            total_work: map(&[("N*M*(R+d)", nf * m * rd), ("N_q*R*d", nq * r * d)]),
            state_memory: map(&[("M*(R+d)", m * rd)]),
            backward_memory: map(&[("(N/K)*M*(R+d)", nf / k * m * rd), ("N_q*R", nq * r)]),
            decode_step: map(&[("M^2*(R+d)", m * m * rd), ("M*(R+d) diagonal C", m * rd)]),
        },
    }
}
