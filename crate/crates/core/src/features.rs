//! Token-level preprocessing: kernel feature maps, the causal short
//! convolution, rotary embeddings and the input RMSNorm with bias.
//!
//! Every differentiable primitive here has a matching `*_backward` used by
//! the layer backward pass.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{CONV_TAPS, EPS};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{dot, Mat};

/// A feature map ξ applied to each row of a token sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureMap {
    /// Random Fourier features `[cos(ωx), sin(ωx)] / √S`; `omega` is `S × d`.
    Rff { omega: Mat },
    /// `SiLU(SC(x)) / max(‖SiLU(SC(x))‖, eps)`; `conv_kernel` is `4 × d`.
    SiluL2 { conv_kernel: Mat },
    Identity,
}

impl FeatureMap {
    /// Gaussian-kernel RFF map with `num_frequencies` frequencies for inputs of
    /// dimension `dim`, kernel `exp(−‖x − x'‖² / (2 bandwidth²))`.
    pub fn gaussian_rff<R: Rng + ?Sized>(
        num_frequencies: usize,
        dim: usize,
        bandwidth: f64,
        rng: &mut R,
    ) -> Self {
        FeatureMap::Rff {
            omega: sample_gaussian_frequencies(num_frequencies, dim, bandwidth, rng),
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            FeatureMap::Rff { omega } => 2 * omega.rows(),
            FeatureMap::SiluL2 { .. } | FeatureMap::Identity => input_dim,
        }
    }

    /// Map a `N × d` sequence to `N × R` features.
    pub fn apply(&self, x_seq: &Mat) -> Result<Mat> {
        match self {
            FeatureMap::Rff { omega } => {
                if omega.cols() != x_seq.cols() {
                    return Err(shape_err("FeatureMap::Rff", omega.cols(), x_seq.cols()));
                }
                let rows: Vec<Vec<f64>> = (0..x_seq.rows())
                    .map(|i| rff_features(x_seq.row(i), omega))
                    .collect();
                if rows.is_empty() {
                    return Ok(Mat::zeros(0, 2 * omega.rows()));
                }
                Mat::from_rows(&rows)
            }
            FeatureMap::SiluL2 { conv_kernel } => silu_l2_features(x_seq, conv_kernel),
            FeatureMap::Identity => Ok(x_seq.clone()),
        }
    }
}

/// Frequencies `ω ~ N(0, I / bandwidth²)`, the spectral density of the
/// Gaussian kernel with that bandwidth.
pub fn sample_gaussian_frequencies<R: Rng + ?Sized>(
    num_frequencies: usize,
    dim: usize,
    bandwidth: f64,
    rng: &mut R,
) -> Mat {
    Mat::from_fn(num_frequencies, dim, |_, _| {
        rng.sample::<f64, _>(StandardNormal) / bandwidth
    })
}

/// Closed-form Gaussian kernel `exp(−‖x − y‖² / (2 bandwidth²))`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], bandwidth: f64) -> f64 {
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-sq / (2.0 * bandwidth * bandwidth)).exp()
}

/// `[cos(ωx), sin(ωx)] / √S`, so that `ξ(x)ᵀξ(x')` is the Monte-Carlo mean of
/// `cos(ωᵀ(x − x'))`.
pub fn rff_features(x: &[f64], omega: &Mat) -> Vec<f64> {
    let s = omega.rows();
    let scale = 1.0 / (s as f64).sqrt();
    let mut out = vec![0.0; 2 * s];
    for j in 0..s {
        let phase = dot(omega.row(j), x);
        out[j] = scale * phase.cos();
        out[s + j] = scale * phase.sin();
    }
    out
}

/// Monte-Carlo kernel estimate `ξ(x)ᵀξ(y)` without materializing features:
/// `(1/S) Σ_j cos(ω_jᵀ(x − y))`.
pub fn rff_kernel_estimate(x: &[f64], y: &[f64], omega: &Mat) -> f64 {
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let s = omega.rows();
    crate::par::block_sum(s, |j| dot(omega.row(j), &diff).cos()) / s as f64
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Causal depthwise convolution with zero left padding:
/// `y[t, c] = Σ_l kernel[l, c] · x[t − l, c]`.
pub fn short_conv(x_seq: &Mat, kernel: &Mat) -> Result<Mat> {
    short_conv_with_context(x_seq, kernel, None)
}

/// As [`short_conv`], with `context` holding the `taps − 1` inputs that
/// precede `x_seq` (oldest first) instead of zero padding.
pub fn short_conv_with_context(x_seq: &Mat, kernel: &Mat, context: Option<&Mat>) -> Result<Mat> {
    let (n, d) = x_seq.shape();
    let taps = kernel.rows();
    if kernel.cols() != d {
        return Err(shape_err("short_conv kernel width", d, kernel.cols()));
    }
    if let Some(ctx) = context {
        if ctx.shape() != (taps - 1, d) {
            return Err(shape_err(
                "short_conv context",
                format!("{}x{}", taps - 1, d),
                format!("{}x{}", ctx.rows(), ctx.cols()),
            ));
        }
    }
    let mut y = Mat::zeros(n, d);
    for t in 0..n {
        for l in 0..taps {
            let src: Option<&[f64]> = if t >= l {
                Some(x_seq.row(t - l))
            } else {
                // position t − l < 0 lives in the context window
                context.map(|ctx| ctx.row(taps - 1 - (l - t)))
            };
            if let Some(src) = src {
                let k = kernel.row(l);
                for ((yo, &kc), &xc) in y.row_mut(t).iter_mut().zip(k).zip(src) {
                    *yo += kc * xc;
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of [`short_conv`] (zero-padded) given upstream `gy`:
/// returns `(grad_x, grad_kernel)`.
pub fn short_conv_backward(x_seq: &Mat, kernel: &Mat, gy: &Mat) -> (Mat, Mat) {
    let (n, d) = x_seq.shape();
    let taps = kernel.rows();
    let mut gx = Mat::zeros(n, d);
    let mut gk = Mat::zeros(taps, d);
    for t in 0..n {
        for l in 0..taps.min(t + 1) {
            for c in 0..d {
                let g = gy[(t, c)];
                gx[(t - l, c)] += kernel[(l, c)] * g;
                gk[(l, c)] += x_seq[(t - l, c)] * g;
            }
        }
    }
    (gx, gk)
}

/// `v / max(‖v‖₂, eps)`: unit norm for any non-negligible `v`, zero for zero.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let denom = dot(v, v).sqrt().max(EPS);
    v.iter().map(|x| x / denom).collect()
}

/// Gradient of [`l2_normalize`] at `v` for upstream `g`.
pub fn l2_normalize_backward(v: &[f64], g: &[f64]) -> Vec<f64> {
    let norm = dot(v, v).sqrt();
    if norm <= EPS {
        return g.iter().map(|x| x / EPS).collect();
    }
    let vg = dot(v, g);
    v.iter()
        .zip(g)
        .map(|(vi, gi)| gi / norm - vi * vg / (norm * norm * norm))
        .collect()
}

/// SiLU followed by the eps-guarded ℓ2 normalization, on one vector.
pub fn silu_l2(u: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = u.iter().map(|&x| silu(x)).collect();
    l2_normalize(&s)
}

pub fn silu_l2_backward(u: &[f64], g: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = u.iter().map(|&x| silu(x)).collect();
    let gs = l2_normalize_backward(&s, g);
    gs.iter().zip(u).map(|(gi, &ui)| gi * silu_grad(ui)).collect()
}

/// Short convolution, SiLU and ℓ2 normalization over the whole row.
pub fn silu_l2_features(x_seq: &Mat, conv_kernel: &Mat) -> Result<Mat> {
    if conv_kernel.rows() != CONV_TAPS {
        return Err(shape_err("silu_l2 conv taps", CONV_TAPS, conv_kernel.rows()));
    }
    let mut y = short_conv(x_seq, conv_kernel)?;
    for t in 0..y.rows() {
        let f = silu_l2(y.row(t));
        y.row_mut(t).copy_from_slice(&f);
    }
    Ok(y)
}

/// Rotary embedding of one vector at `position`: dimension pairs
/// `(2j, 2j+1)` rotate by `position · base^(−2j/dim)`.
pub fn rope_apply(x: &[f64], position: usize, base: f64) -> Result<Vec<f64>> {
    if !x.len().is_multiple_of(2) {
        return Err(Error::OddDimension { dim: x.len() });
    }
    let mut out = x.to_vec();
    rope_rotate(&mut out, position as f64, base);
    Ok(out)
}

/// In-place rotation by `position` (negative positions rotate backwards,
/// which is the transpose used in the backward pass).
pub fn rope_rotate(x: &mut [f64], position: f64, base: f64) {
    let dim = x.len();
    debug_assert!(dim.is_multiple_of(2));
    for j in 0..dim / 2 {
        let freq = base.powf(-2.0 * j as f64 / dim as f64);
        let (sin, cos) = (position * freq).sin_cos();
        let (a, b) = (x[2 * j], x[2 * j + 1]);
        x[2 * j] = a * cos - b * sin;
        x[2 * j + 1] = a * sin + b * cos;
    }
}

/// Per-channel gain and additive bias for [`rmsnorm_bias`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBias {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl NormBias {
    /// Unit gain, zero bias.
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }
}

/// `gain ⊙ x / √(mean(x²) + eps) + bias`.
pub fn rmsnorm_bias(x: &[f64], params: &NormBias) -> Vec<f64> {
    let r = rms(x);
    x.iter()
        .zip(&params.gain)
        .zip(&params.bias)
        .map(|((xi, g), b)| g * xi / r + b)
        .collect()
}

fn rms(x: &[f64]) -> f64 {
    (dot(x, x) / x.len() as f64 + EPS).sqrt()
}

/// Gradients of [`rmsnorm_bias`]: returns `grad_x` and accumulates into
/// `grad_params`.
pub fn rmsnorm_bias_backward(x: &[f64], params: &NormBias, gy: &[f64], grad_params: &mut NormBias) -> Vec<f64> {
    let n = x.len() as f64;
    let r = rms(x);
    let mut weighted = 0.0;
    for i in 0..x.len() {
        grad_params.gain[i] += gy[i] * x[i] / r;
        grad_params.bias[i] += gy[i];
        weighted += gy[i] * params.gain[i] * x[i];
    }
    x.iter()
        .enumerate()
        .map(|(j, &xj)| gy[j] * params.gain[j] / r - xj * weighted / (n * r * r * r))
        .collect()
}
