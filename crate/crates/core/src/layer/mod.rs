//! The learned token mixer and its three ablation siblings.
//!
//! Column layout of every projected stream is head-major (or cell-major):
//! head `h` of the query occupies columns `h·R..(h+1)·R`, cell `c` of the key
//! stream `c·R..(c+1)·R`, and so on. A cell is one SSM together with its
//! input norms; heads map onto cells through [`ModelConfig::cell_of_head`].

mod backward;
pub mod blob;
mod forward;

pub use backward::{backward, backward_from_cache, LayerGrads};
pub use forward::{decode_step, forward, forward_grouped_kv, forward_with_cache, prefill, DecodeState, ForwardCache};

use num_complex::Complex64;
use rand::Rng;

use crate::config::{ModelConfig, Rng as SeededRng, CONV_TAPS};
use crate::error::{shape_err, Error, Result};
use crate::features::NormBias;
use crate::linalg::Mat;
use crate::ssm::DiagonalSSM;

/// Parameters owned by one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams {
    /// Gain and bias on the key (or `a`) half of the SSM input, width `R`.
    pub norm_k: NormBias,
    /// Gain and bias on the value (or `b`) half, width `d_h`.
    pub norm_v: NormBias,
    pub ssm: DiagonalSSM,
    /// Linear contraction over the `M` state rows (linear variants only).
    pub c_out: Option<Vec<f64>>,
}

/// All trainable tensors of one layer. The same type holds gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `d × H·R`; absent for variants without a query path.
    pub w_q: Option<Mat>,
    /// `d × n_kv·R`: key projection, or `W_a` for the generic-input variants.
    pub w_k: Mat,
    /// `d × n_kv·d_h`: value projection, or `W_b`.
    pub w_v: Mat,
    /// `P × d` where `P` is the pre-output width ([`out_width`]).
    pub w_o: Mat,
    /// `d × P`; present when the output gate is enabled.
    pub w_g: Option<Mat>,
    pub conv_q: Option<Mat>,
    pub conv_k: Mat,
    /// Short conv on the `b` stream of the generic-input variants.
    pub conv_v: Option<Mat>,
    pub cells: Vec<CellParams>,
}

/// Width of the concatenated pre-output: `H·d_h` with a query readout,
/// `n_kv·(R + d_h)` with the linear contraction.
pub fn out_width(cfg: &ModelConfig) -> usize {
    if cfg.variant.has_query() {
        cfg.heads * cfg.head_dim
    } else {
        cfg.n_kv * cfg.input_width()
    }
}

/// Borrowed view of one named tensor.
pub enum TensorRef<'a> {
    Real(&'a [f64]),
    Complex(&'a [Complex64]),
}

/// Mutable view of one named tensor.
pub enum TensorMut<'a> {
    Real(&'a mut [f64]),
    Complex(&'a mut [Complex64]),
}

impl TensorRef<'_> {
    /// Real scalars, counting a complex entry as two.
    pub fn scalar_len(&self) -> usize {
        match self {
            TensorRef::Real(v) => v.len(),
            TensorRef::Complex(v) => 2 * v.len(),
        }
    }
}

/// Name and shape of one tensor, in visiting order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub complex: bool,
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Mat {
    Mat::random_normal(rows, cols, scale, rng)
}

impl LayerParams {
    /// Initialization used for training: Gaussian projections scaled by
    /// `1/√fan_in`, S4D-Inv dynamics, unit norms with zero bias and a zero
    /// linear contraction.
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        Self::build(cfg, rng, false)
    }

    /// Every tensor filled with generic nonzero values, including biases and
    /// the linear contraction. For tests that must exercise every path.
    pub fn randomized(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        Self::build(cfg, rng, true)
    }

    fn build(cfg: &ModelConfig, rng: &mut SeededRng, generic: bool) -> Self {
        let (d, h, r, dh, m, kv) = (cfg.model_dim, cfg.heads, cfg.feature_dim, cfg.head_dim, cfg.state_dim, cfg.n_kv);
        let p = out_width(cfg);
        let proj = 1.0 / (d as f64).sqrt();
        let conv_scale = 1.0 / (CONV_TAPS as f64).sqrt();
        let w_q = cfg.variant.has_query().then(|| gaussian(d, h * r, proj, rng));
        let w_k = gaussian(d, kv * r, proj, rng);
        let w_v = gaussian(d, kv * dh, proj, rng);
        let w_o = gaussian(p, d, 1.0 / (p as f64).sqrt(), rng);
        let w_g = cfg.output_gate_enabled.then(|| gaussian(d, p, proj, rng));
        let conv_q = cfg.variant.has_query().then(|| gaussian(CONV_TAPS, h * r, conv_scale, rng));
        let conv_k = gaussian(CONV_TAPS, kv * r, conv_scale, rng);
        let conv_v = (!cfg.variant.dual_kv()).then(|| gaussian(CONV_TAPS, kv * dh, conv_scale, rng));
        let cells = (0..kv)
            .map(|_| {
                let mut ssm = DiagonalSSM::init(m, cfg.input_width(), rng);
                let norm = |dim: usize, rng: &mut SeededRng| {
                    if generic {
                        NormBias {
                            gain: (0..dim).map(|_| rng.random_range(0.5..1.5)).collect(),
                            bias: (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
                        }
                    } else {
                        NormBias::identity(dim)
                    }
                };
                let norm_k = norm(r, rng);
                let norm_v = norm(dh, rng);
                if generic {
                    ssm.delta.iter_mut().for_each(|x| *x = rng.random_range(0.05..0.5));
                    ssm.b = (0..m)
                        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                        .collect();
                }
                let c_out = (!cfg.variant.has_query()).then(|| {
                    if generic {
                        (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()
                    } else {
                        vec![0.0; m]
                    }
                });
                CellParams {
                    norm_k,
                    norm_v,
                    ssm,
                    c_out,
                }
            })
            .collect();
        Self {
            w_q,
            w_k,
            w_v,
            w_o,
            w_g,
            conv_q,
            conv_k,
            conv_v,
            cells,
        }
    }

    /// Check every tensor shape against `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = Self::layout(cfg);
        let mine = self.infos();
        if mine != reference {
            let first = mine
                .iter()
                .zip(&reference)
                .find(|(a, b)| a != b)
                .map(|(a, b)| (format!("{} {:?}", b.name, b.shape), format!("{} {:?}", a.name, a.shape)))
                .unwrap_or_else(|| (format!("{} tensors", reference.len()), format!("{} tensors", mine.len())));
            return Err(shape_err("layer parameters", first.0, first.1));
        }
        for (i, cell) in self.cells.iter().enumerate() {
            if cell.ssm.input_width != cfg.input_width() {
                return Err(shape_err("cell SSM input width", cfg.input_width(), format!("{} (cell {i})", cell.ssm.input_width)));
            }
        }
        Ok(())
    }

    /// Tensor names and shapes a config implies, without allocating values.
    pub fn layout(cfg: &ModelConfig) -> Vec<TensorInfo> {
        Self::zeros(cfg).infos()
    }

    /// All-zero parameters with the shapes `cfg` implies.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut p = Self::init(cfg, &mut crate::config::rng_from_seed(0));
        p.fill_zero();
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        p.fill_zero();
        p
    }

    fn fill_zero(&mut self) {
        self.visit_mut(&mut |_, _, t| match t {
            TensorMut::Real(v) => v.iter_mut().for_each(|x| *x = 0.0),
            TensorMut::Complex(v) => v.iter_mut().for_each(|x| *x = Complex64::new(0.0, 0.0)),
        });
    }

    /// Visit every tensor in a fixed order with its name and shape.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], TensorRef)) {
        let mat = |f: &mut dyn FnMut(&str, &[usize], TensorRef), name: &str, m: &Mat| {
            f(name, &[m.rows(), m.cols()], TensorRef::Real(m.as_slice()))
        };
        let generic = self.conv_v.is_some();
        if let Some(w) = &self.w_q {
            mat(f, "w_q", w);
        }
        mat(f, if generic { "w_a" } else { "w_k" }, &self.w_k);
        mat(f, if generic { "w_b" } else { "w_v" }, &self.w_v);
        mat(f, "w_o", &self.w_o);
        if let Some(w) = &self.w_g {
            mat(f, "w_g", w);
        }
        if let Some(w) = &self.conv_q {
            mat(f, "conv_q", w);
        }
        mat(f, if generic { "conv_a" } else { "conv_k" }, &self.conv_k);
        if let Some(w) = &self.conv_v {
            mat(f, "conv_b", w);
        }
        for (i, c) in self.cells.iter().enumerate() {
            let m = c.ssm.state_dim();
            let (r, dh) = (c.norm_k.dim(), c.norm_v.dim());
            f(&format!("cell{i}.norm_k.gain"), &[r], TensorRef::Real(&c.norm_k.gain));
            f(&format!("cell{i}.norm_k.bias"), &[r], TensorRef::Real(&c.norm_k.bias));
            f(&format!("cell{i}.norm_v.gain"), &[dh], TensorRef::Real(&c.norm_v.gain));
            f(&format!("cell{i}.norm_v.bias"), &[dh], TensorRef::Real(&c.norm_v.bias));
            f(&format!("cell{i}.ssm.delta"), &[m], TensorRef::Real(&c.ssm.delta));
            f(&format!("cell{i}.ssm.log_neg_re_a"), &[m], TensorRef::Real(&c.ssm.log_neg_re_a));
            f(&format!("cell{i}.ssm.im_a"), &[m], TensorRef::Real(&c.ssm.im_a));
            f(&format!("cell{i}.ssm.b"), &[m], TensorRef::Complex(&c.ssm.b));
            f(&format!("cell{i}.ssm.c"), &[m, m], TensorRef::Complex(&c.ssm.c));
            if let Some(v) = &c.c_out {
                f(&format!("cell{i}.c_out"), &[m], TensorRef::Real(v));
            }
        }
    }

    /// Mutable counterpart of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], TensorMut)) {
        fn mat(f: &mut dyn FnMut(&str, &[usize], TensorMut), name: &str, m: &mut Mat) {
            let shape = [m.rows(), m.cols()];
            f(name, &shape, TensorMut::Real(m.as_mut_slice()))
        }
        let generic = self.conv_v.is_some();
        if let Some(w) = &mut self.w_q {
            mat(f, "w_q", w);
        }
        mat(f, if generic { "w_a" } else { "w_k" }, &mut self.w_k);
        mat(f, if generic { "w_b" } else { "w_v" }, &mut self.w_v);
        mat(f, "w_o", &mut self.w_o);
        if let Some(w) = &mut self.w_g {
            mat(f, "w_g", w);
        }
        if let Some(w) = &mut self.conv_q {
            mat(f, "conv_q", w);
        }
        mat(f, if generic { "conv_a" } else { "conv_k" }, &mut self.conv_k);
        if let Some(w) = &mut self.conv_v {
            mat(f, "conv_b", w);
        }
        for (i, c) in self.cells.iter_mut().enumerate() {
            let m = c.ssm.state_dim();
            let (r, dh) = (c.norm_k.dim(), c.norm_v.dim());
            f(&format!("cell{i}.norm_k.gain"), &[r], TensorMut::Real(&mut c.norm_k.gain));
            f(&format!("cell{i}.norm_k.bias"), &[r], TensorMut::Real(&mut c.norm_k.bias));
            f(&format!("cell{i}.norm_v.gain"), &[dh], TensorMut::Real(&mut c.norm_v.gain));
            f(&format!("cell{i}.norm_v.bias"), &[dh], TensorMut::Real(&mut c.norm_v.bias));
            f(&format!("cell{i}.ssm.delta"), &[m], TensorMut::Real(&mut c.ssm.delta));
            f(&format!("cell{i}.ssm.log_neg_re_a"), &[m], TensorMut::Real(&mut c.ssm.log_neg_re_a));
            f(&format!("cell{i}.ssm.im_a"), &[m], TensorMut::Real(&mut c.ssm.im_a));
            f(&format!("cell{i}.ssm.b"), &[m], TensorMut::Complex(&mut c.ssm.b));
            f(&format!("cell{i}.ssm.c"), &[m, m], TensorMut::Complex(&mut c.ssm.c));
            if let Some(v) = &mut c.c_out {
                f(&format!("cell{i}.c_out"), &[m], TensorMut::Real(v));
            }
        }
    }

    pub fn infos(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        self.visit(&mut |name, shape, t| {
            out.push(TensorInfo {
                name: name.to_string(),
                shape: shape.to_vec(),
                complex: matches!(t, TensorRef::Complex(_)),
            })
        });
        out
    }

    /// Trainable real scalars (a complex entry counts as two).
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, t| n += t.scalar_len());
        n
    }

    /// Every scalar in visiting order; complex entries as `(re, im)`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, t| match t {
            TensorRef::Real(v) => out.extend_from_slice(v),
            TensorRef::Complex(v) => out.extend(v.iter().flat_map(|c| [c.re, c.im])),
        });
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat).
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(shape_err("LayerParams::set_flat", n, flat.len()));
        }
        let mut pos = 0;
        self.visit_mut(&mut |_, _, t| match t {
            TensorMut::Real(v) => {
                v.copy_from_slice(&flat[pos..pos + v.len()]);
                pos += v.len();
            }
            TensorMut::Complex(v) => {
                for c in v.iter_mut() {
                    *c = Complex64::new(flat[pos], flat[pos + 1]);
                    pos += 2;
                }
            }
        });
        Ok(())
    }

    /// Tensor by name, for inspection in tests and tools.
    pub fn tensor(&self, name: &str) -> Option<Vec<f64>> {
        let mut out = None;
        self.visit(&mut |n, _, t| {
            if n == name {
                out = Some(match t {
                    TensorRef::Real(v) => v.to_vec(),
                    TensorRef::Complex(v) => v.iter().flat_map(|c| [c.re, c.im]).collect(),
                });
            }
        });
        out
    }
}

pub(crate) fn unsupported_readout() -> Error {
    Error::Unsupported("the learned layer has no normalizer channel; use readout = denominator_free".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{rng_from_seed, Variant};

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            output_gate_enabled: true,
            ..Default::default()
        }
    }

    #[test]
    fn flat_round_trip() {
        for v in Variant::ALL {
            let c = cfg(v);
            let p = LayerParams::randomized(&c, &mut rng_from_seed(1));
            let mut q = LayerParams::zeros(&c);
            q.set_flat(&p.to_flat()).unwrap();
            assert_eq!(p, q);
            assert!(p.check(&c).is_ok());
        }
    }

    #[test]
    fn query_weights_absent_without_query_path() {
        for v in [Variant::DualKvLinear, Variant::S4dOnly] {
            let p = LayerParams::init(&cfg(v), &mut rng_from_seed(2));
            assert!(p.w_q.is_none() && p.conv_q.is_none());
            assert!(p.tensor("w_q").is_none());
            assert!(p.cells.iter().all(|c| c.c_out.as_ref().unwrap().iter().all(|&x| x == 0.0)));
        }
    }

    #[test]
    fn init_follows_s4d_inv() {
        let p = LayerParams::init(&cfg(Variant::FullInterdomain), &mut rng_from_seed(3));
        for cell in &p.cells {
            assert!(cell.ssm.b.iter().all(|b| *b == Complex64::new(1.0, 0.0)));
            assert!(cell.ssm.a().iter().all(|a| (a.re + 0.5).abs() < 1e-15));
            assert!(cell.norm_k.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let c = cfg(Variant::FullInterdomain);
        let p = LayerParams::init(&c, &mut rng_from_seed(4));
        let other = ModelConfig {
            state_dim: 5,
            ..c.clone()
        };
        assert!(p.check(&other).is_err());
        assert!(p.check(&cfg(Variant::S4dOnly)).is_err());
    }
}
