//! Model configuration, validation and seeded randomness.
//!
//! The config file is a flat JSON object whose keys are exactly the field
//! names of [`ModelConfig`]; unknown keys are rejected.

use std::ops::Deref;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stability constant inside RMSNorm and the ℓ2 feature-map guard.
pub const EPS: f64 = 1e-6;

/// Rotary embedding base.
pub const ROPE_BASE: f64 = 10_000.0;

/// Taps of the causal depthwise short convolution.
pub const CONV_TAPS: usize = 4;

/// Deterministic generator used everywhere a random draw is needed.
///
/// ChaCha8 produces the same integer stream for the same seed on every
/// platform.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` derived from `seed`.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Sequential,
    Fft,
    Chunkwise,
    ParallelPrefix,
}

impl Backend {
    pub const ALL: [Backend; 4] = [
        Backend::Sequential,
        Backend::Fft,
        Backend::Chunkwise,
        Backend::ParallelPrefix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Sequential => "sequential",
            Backend::Fft => "fft",
            Backend::Chunkwise => "chunkwise",
            Backend::ParallelPrefix => "parallel_prefix",
        }
    }
}

/// The four mechanism cells: {dual key/value input, generic input} ×
/// {query-conditioned readout, linear contraction}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FullInterdomain,
    DualKvLinear,
    SingleInputQproj,
    S4dOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::FullInterdomain,
        Variant::DualKvLinear,
        Variant::SingleInputQproj,
        Variant::S4dOnly,
    ];

    /// Query features read the state (`ξ(q) Uᵀ Γ`).
    pub fn has_query(self) -> bool {
        matches!(self, Variant::FullInterdomain | Variant::SingleInputQproj)
    }

    /// SSM input is `[ξ(k), v]` rather than generic `[a, b]`.
    pub fn dual_kv(self) -> bool {
        matches!(self, Variant::FullInterdomain | Variant::DualKvLinear)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::FullInterdomain => "full_interdomain",
            Variant::DualKvLinear => "dual_kv_linear",
            Variant::SingleInputQproj => "single_input_qproj",
            Variant::S4dOnly => "s4d_only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Normalized by `ξ(q) Uᵀ η`.
    Nw,
    DenominatorFree,
}

/// All architecture hyperparameters of one token-mixer layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub feature_dim: usize,
    pub state_dim: usize,
    pub context_len: usize,
    /// Chunk size of the chunkwise scan and checkpoint interval of the backward.
    pub chunk_size: usize,
    pub prefill_chunk: usize,
    pub backend: Backend,
    pub variant: Variant,
    pub rope_enabled: bool,
    pub output_gate_enabled: bool,
    pub n_kv: usize,
    pub readout: Readout,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            model_dim: 8,
            head_dim: 4,
            feature_dim: 4,
            state_dim: 4,
            context_len: 256,
            chunk_size: 16,
            prefill_chunk: 8,
            backend: Backend::Sequential,
            variant: Variant::FullInterdomain,
            rope_enabled: true,
            output_gate_enabled: false,
            n_kv: 2,
            readout: Readout::DenominatorFree,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The 1.3B-scale layer (d=2048, H=32, d_h=R=M=64, L=4096).
    pub fn scale_1p3b() -> Self {
        Self {
            heads: 32,
            model_dim: 2048,
            head_dim: 64,
            feature_dim: 64,
            state_dim: 64,
            context_len: 4096,
            chunk_size: 64,
            prefill_chunk: 2048,
            n_kv: 32,
            rope_enabled: true,
            ..Self::default()
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SSM input width per cell: key half plus value half.
    pub fn input_width(&self) -> usize {
        self.feature_dim + self.head_dim
    }

    /// Head-to-cell map: heads share a cell when `n_kv < heads`.
    pub fn cell_of_head(&self, head: usize) -> usize {
        head * self.n_kv / self.heads
    }
}

/// A configuration whose invariants have been checked.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidatedConfig(ModelConfig);

impl ValidatedConfig {
    pub fn into_inner(self) -> ModelConfig {
        self.0
    }
}

impl Deref for ValidatedConfig {
    type Target = ModelConfig;
    fn deref(&self) -> &ModelConfig {
        &self.0
    }
}

fn invalid(invariant: impl Into<String>) -> Error {
    Error::InvalidConfig {
        invariant: invariant.into(),
    }
}

/// Check every config invariant; the first violated one is named in the error.
pub fn validate(config: ModelConfig) -> Result<ValidatedConfig> {
    let c = &config;
    let counts = [
        ("heads", c.heads),
        ("model_dim", c.model_dim),
        ("head_dim", c.head_dim),
        ("feature_dim", c.feature_dim),
        ("state_dim", c.state_dim),
        ("context_len", c.context_len),
        ("chunk_size", c.chunk_size),
        ("prefill_chunk", c.prefill_chunk),
        ("n_kv", c.n_kv),
    ];
    for (name, v) in counts {
        if v == 0 {
            return Err(invalid(format!("{name} must be positive")));
        }
    }
    if c.heads.checked_mul(c.head_dim) != Some(c.model_dim) {
        return Err(invalid(format!(
            "heads * head_dim = model_dim ({} * {} != {})",
            c.heads, c.head_dim, c.model_dim
        )));
    }
    if c.chunk_size > c.context_len {
        return Err(invalid(format!(
            "1 <= chunk_size <= context_len ({} > {})",
            c.chunk_size, c.context_len
        )));
    }
    if c.n_kv != 1 && c.n_kv != c.heads {
        return Err(invalid(format!(
            "n_kv in {{1, heads}} (n_kv = {}, heads = {})",
            c.n_kv, c.heads
        )));
    }
    if c.rope_enabled && !c.feature_dim.is_multiple_of(2) {
        return Err(invalid(format!(
            "feature_dim even when rope_enabled (feature_dim = {})",
            c.feature_dim
        )));
    }
    Ok(ValidatedConfig(config))
}
