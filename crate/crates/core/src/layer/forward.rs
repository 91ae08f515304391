use num_complex::Complex64;

use super::{out_width, unsupported_readout, LayerParams};
use crate::config::{Backend, ModelConfig, Readout, CONV_TAPS, ROPE_BASE};
use crate::error::{shape_err, Error, Result};
use crate::features::{rmsnorm_bias, rope_rotate, short_conv_with_context, silu, silu_l2};
use crate::linalg::{dot, Mat};
use crate::par;
use crate::ssm::{scan, OutputSeq, ScanCheckpoints};

/// Recurrent state of one decode session: position, the last `taps − 1`
/// pre-convolution rows of each convolved stream, and one SSM state per cell.
/// Its size does not depend on how many tokens have been consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    pub(crate) position: usize,
    pub(crate) conv_q: Option<Mat>,
    pub(crate) conv_k: Mat,
    pub(crate) conv_v: Option<Mat>,
    pub(crate) ssm: Vec<Vec<Complex64>>,
}

impl DecodeState {
    pub fn new(params: &LayerParams) -> Self {
        let tail = |m: &Mat| Mat::zeros(CONV_TAPS - 1, m.cols());
        Self {
            position: 0,
            conv_q: params.conv_q.as_ref().map(tail),
            conv_k: tail(&params.conv_k),
            conv_v: params.conv_v.as_ref().map(tail),
            ssm: params.cells.iter().map(|c| c.ssm.zero_state()).collect(),
        }
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn ssm_state(&self, cell: usize) -> &[Complex64] {
        &self.ssm[cell]
    }

    /// Real values held by the session (complex entries count twice).
    pub fn live_values(&self) -> usize {
        let tails = self.conv_q.as_ref().map_or(0, |m| m.as_slice().len())
            + self.conv_k.as_slice().len()
            + self.conv_v.as_ref().map_or(0, |m| m.as_slice().len());
        tails + 2 * self.ssm.iter().map(Vec::len).sum::<usize>()
    }
}

/// Activations retained by a full-sequence forward for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub(crate) x: Mat,
    pub(crate) q_pre: Option<Mat>,
    /// Query after conv and rotary embedding (input of the feature map).
    pub(crate) q_rot: Option<Mat>,
    pub(crate) q_feat: Option<Mat>,
    pub(crate) k_pre: Mat,
    pub(crate) k_rot: Mat,
    /// Input of the key-side norm.
    pub(crate) k_feat: Mat,
    pub(crate) v_pre: Mat,
    /// Input of the value-side norm.
    pub(crate) v_in: Mat,
    pub(crate) z: Vec<Mat>,
    pub(crate) ckpts: Vec<ScanCheckpoints>,
    pub(crate) y: Vec<OutputSeq>,
    pub(crate) o: Mat,
    pub(crate) gate_pre: Option<Mat>,
    pub(crate) o_gated: Mat,
}

impl ForwardCache {
    /// SSM input at every position, per cell.
    pub fn ssm_inputs(&self) -> &[Mat] {
        &self.z
    }

    /// Concatenated per-head (or per-cell) output before the gate and `W_o`.
    pub fn pre_output(&self) -> &Mat {
        &self.o
    }

    /// Real values retained for the backward pass.
    pub fn stored_values(&self) -> usize {
        let mats = [
            Some(&self.x),
            self.q_pre.as_ref(),
            self.q_rot.as_ref(),
            self.q_feat.as_ref(),
            Some(&self.k_pre),
            Some(&self.k_rot),
            Some(&self.k_feat),
            Some(&self.v_pre),
            Some(&self.v_in),
            Some(&self.o),
            self.gate_pre.as_ref(),
            Some(&self.o_gated),
        ];
        mats.iter().flatten().map(|m| m.as_slice().len()).sum::<usize>()
            + self.z.iter().map(|m| m.as_slice().len()).sum::<usize>()
            + self.y.iter().map(|y| y.as_slice().len()).sum::<usize>()
            + 2 * self.ckpts.iter().map(ScanCheckpoints::stored_len).sum::<usize>()
    }
}

/// Rotate every `width`-wide slice of row `t` by position `pos0 + t`
/// (`sign = −1` applies the inverse).
pub(crate) fn rope_rows(m: &mut Mat, width: usize, pos0: usize, sign: f64) {
    for t in 0..m.rows() {
        let pos = sign * (pos0 + t) as f64;
        for slice in m.row_mut(t).chunks_mut(width) {
            rope_rotate(slice, pos, ROPE_BASE);
        }
    }
}

fn silu_l2_rows(m: &Mat, width: usize) -> Mat {
    let mut out = m.clone();
    for t in 0..m.rows() {
        for (dst, src) in out.row_mut(t).chunks_mut(width).zip(m.row(t).chunks(width)) {
            dst.copy_from_slice(&silu_l2(src));
        }
    }
    out
}

/// Last `taps − 1` rows of `context ++ input`.
fn next_tail(context: &Mat, input: &Mat) -> Mat {
    let keep = context.rows();
    let joined = context.vcat(input).expect("equal widths");
    joined.slice_rows(joined.rows() - keep, joined.rows())
}

fn conv_stream(input: &Mat, kernel: &Mat, tail: Option<&mut Mat>) -> Result<Mat> {
    match tail {
        Some(t) => {
            let out = short_conv_with_context(input, kernel, Some(t))?;
            *t = next_tail(t, input);
            Ok(out)
        }
        None => short_conv_with_context(input, kernel, None),
    }
}

fn check_inputs(params: &LayerParams, x: &Mat, cfg: &ModelConfig) -> Result<()> {
    if cfg.readout == Readout::Nw {
        return Err(unsupported_readout());
    }
    params.check(cfg)?;
    if cfg.rope_enabled && !cfg.feature_dim.is_multiple_of(2) {
        return Err(Error::OddDimension { dim: cfg.feature_dim });
    }
    if x.cols() != cfg.model_dim {
        return Err(shape_err("layer input width", cfg.model_dim, x.cols()));
    }
    Ok(())
}

/// The single forward code path. With a session `state` the convolutions
/// read its tails, rotary positions start at its position and every scan
/// starts from its SSM states; all of these are advanced on return.
pub(crate) fn forward_impl(
    params: &LayerParams,
    x: &Mat,
    cfg: &ModelConfig,
    mut state: Option<&mut DecodeState>,
    keep_cache: bool,
    backend: Backend,
) -> Result<(Mat, Option<ForwardCache>)> {
    check_inputs(params, x, cfg)?;
    let n = x.rows();
    let (h, r, dh, kv) = (cfg.heads, cfg.feature_dim, cfg.head_dim, cfg.n_kv);
    let w = cfg.input_width();
    if let Some(st) = state.as_deref() {
        if st.ssm.len() != kv || st.ssm.iter().any(|s| s.len() != cfg.state_dim * w) {
            return Err(shape_err("decode state", format!("{kv} cells of {}", cfg.state_dim * w), "other"));
        }
    }
    let pos0 = state.as_deref().map_or(0, |s| s.position);

    let q_pre = params.w_q.as_ref().map(|wq| x.matmul(wq)).transpose()?;
    let k_pre = x.matmul(&params.w_k)?;
    let v_pre = x.matmul(&params.w_v)?;

    let q_rot = match (&q_pre, &params.conv_q) {
        (Some(q), Some(kq)) => {
            let tail = state.as_deref_mut().and_then(|s| s.conv_q.as_mut());
            let mut q = conv_stream(q, kq, tail)?;
            if cfg.rope_enabled {
                rope_rows(&mut q, r, pos0, 1.0);
            }
            Some(q)
        }
        _ => None,
    };
    let mut k_rot = conv_stream(&k_pre, &params.conv_k, state.as_deref_mut().map(|s| &mut s.conv_k))?;
    if cfg.rope_enabled {
        rope_rows(&mut k_rot, r, pos0, 1.0);
    }
    let q_feat = q_rot.as_ref().map(|q| silu_l2_rows(q, r));
    let k_feat = if cfg.variant.dual_kv() {
        silu_l2_rows(&k_rot, r)
    } else {
        k_rot.clone()
    };
    let v_in = match &params.conv_v {
        Some(kv_kernel) => conv_stream(&v_pre, kv_kernel, state.as_deref_mut().and_then(|s| s.conv_v.as_mut()))?,
        None => v_pre.clone(),
    };

    let z: Vec<Mat> = par::map_range(kv, |c| {
        let cell = &params.cells[c];
        let mut zc = Mat::zeros(n, w);
        for t in 0..n {
            let row = zc.row_mut(t);
            row[..r].copy_from_slice(&rmsnorm_bias(&k_feat.row(t)[c * r..(c + 1) * r], &cell.norm_k));
            row[r..].copy_from_slice(&rmsnorm_bias(&v_in.row(t)[c * dh..(c + 1) * dh], &cell.norm_v));
        }
        zc
    });

    let x_init: Vec<Vec<Complex64>> = match state.as_deref() {
        Some(s) => s.ssm.clone(),
        None => params.cells.iter().map(|c| c.ssm.zero_state()).collect(),
    };
    let chunk = cfg.chunk_size.min(n).max(1);
    let scans = par::map_range(kv, |c| -> Result<_> {
        let ssm = &params.cells[c].ssm;
        if n == 0 {
            return Ok((OutputSeq::zeros(0, ssm.state_dim(), w), None, x_init[c].clone()));
        }
        let states = scan(ssm, &z[c], backend, chunk, Some(&x_init[c]))?;
        let ckpt = keep_cache
            .then(|| ScanCheckpoints::from_states(&states, &x_init[c], cfg.chunk_size))
            .transpose()?;
        let last = states.last().expect("n > 0").to_vec();
        Ok((ssm.readout(&states), ckpt, last))
    });
    let mut y = Vec::with_capacity(kv);
    let mut ckpts = Vec::with_capacity(kv);
    let mut finals = Vec::with_capacity(kv);
    for s in scans {
        let (yc, ck, last) = s?;
        y.push(yc);
        ckpts.extend(ck);
        finals.push(last);
    }

    let p = out_width(cfg);
    let mut o = Mat::zeros(n, p);
    if let Some(qf) = &q_feat {
        par::for_each_chunk_mut(o.as_mut_slice(), p.max(1), |t, row| {
            for head in 0..h {
                let yt = y[cfg.cell_of_head(head)].at(t);
                let q = &qf.row(t)[head * r..(head + 1) * r];
                let out = &mut row[head * dh..(head + 1) * dh];
                for ym in yt.chunks(w) {
                    let s = dot(q, &ym[..r]);
                    for (oe, g) in out.iter_mut().zip(&ym[r..]) {
                        *oe += s * g;
                    }
                }
            }
        });
    } else {
        par::for_each_chunk_mut(o.as_mut_slice(), p.max(1), |t, row| {
            for (c, cell) in params.cells.iter().enumerate() {
                let c_out = cell.c_out.as_ref().expect("linear variant has c_out");
                let out = &mut row[c * w..(c + 1) * w];
                for (cm, ym) in c_out.iter().zip(y[c].at(t).chunks(w)) {
                    for (oe, v) in out.iter_mut().zip(ym) {
                        *oe += cm * v;
                    }
                }
            }
        });
    }

    let gate_pre = params.w_g.as_ref().map(|wg| x.matmul(wg)).transpose()?;
    let o_gated = match &gate_pre {
        Some(g) => Mat::from_fn(n, p, |i, j| silu(g[(i, j)]) * o[(i, j)]),
        None => o.clone(),
    };
    let out = o_gated.matmul(&params.w_o)?;

    if let Some(st) = state {
        st.position += n;
        st.ssm = finals;
    }
    let cache = keep_cache.then(|| ForwardCache {
        x: x.clone(),
        q_pre,
        q_rot,
        q_feat,
        k_pre,
        k_rot,
        k_feat,
        v_pre,
        v_in,
        z,
        ckpts,
        y,
        o,
        gate_pre,
        o_gated,
    });
    Ok((out, cache))
}

/// Full-sequence forward from an empty state, with the configured backend.
pub fn forward(params: &LayerParams, x: &Mat, cfg: &ModelConfig) -> Result<Mat> {
    Ok(forward_impl(params, x, cfg, None, false, cfg.backend)?.0)
}

/// [`forward`] that also returns the activations the backward pass needs.
pub fn forward_with_cache(params: &LayerParams, x: &Mat, cfg: &ModelConfig) -> Result<(Mat, ForwardCache)> {
    let (out, cache) = forward_impl(params, x, cfg, None, true, cfg.backend)?;
    Ok((out, cache.expect("cache requested")))
}

/// Forward with one `(U, Γ)` state shared by all heads.
pub fn forward_grouped_kv(params: &LayerParams, x: &Mat, cfg: &ModelConfig) -> Result<Mat> {
    if cfg.n_kv != 1 {
        return Err(Error::InvalidConfig {
            invariant: format!("forward_grouped_kv requires n_kv = 1 (n_kv = {})", cfg.n_kv),
        });
    }
    forward(params, x, cfg)
}

/// Consume `x` in chunks of `chunk` rows, advancing `state`. Returns the
/// outputs of every row.
pub fn prefill(params: &LayerParams, x: &Mat, cfg: &ModelConfig, state: &mut DecodeState, chunk: usize) -> Result<Mat> {
    if chunk == 0 {
        return Err(shape_err("prefill chunk", ">= 1", 0));
    }
    let mut out = Mat::zeros(0, cfg.model_dim);
    let mut lo = 0;
    while lo < x.rows() {
        let hi = (lo + chunk).min(x.rows());
        let (y, _) = forward_impl(params, &x.slice_rows(lo, hi), cfg, Some(state), false, cfg.backend)?;
        out = out.vcat(&y)?;
        lo = hi;
    }
    Ok(out)
}

/// One token through the sequential recurrence.
pub fn decode_step(params: &LayerParams, state: &mut DecodeState, token: &[f64], cfg: &ModelConfig) -> Result<Vec<f64>> {
    let x = Mat::from_vec(1, token.len(), token.to_vec())?;
    let (y, _) = forward_impl(params, &x, cfg, Some(state), false, Backend::Sequential)?;
    Ok(y.into_vec())
}
