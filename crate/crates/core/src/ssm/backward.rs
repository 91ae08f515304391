//! Reverse pass through the scan with segmented checkpointing.
//!
//! Only the states at positions `0, K, 2K, …, N` are kept. Each segment is
//! walked backwards from its right checkpoint with the inverse recurrence
//! `x_{p−1} = (x_p − B z_p) / Λ`, and the left checkpoint is reloaded at the
//! segment start. When some `|Λ_m|` is below [`LAMBDA_MIN`] the division is
//! unsafe and the segment is recomputed forward from its left checkpoint.
//!
//! Complex gradients follow `ḡ = ∂L/∂Re + i ∂L/∂Im`.

use num_complex::Complex64;

use super::scan::step_with;
use super::{DiagonalSSM, OutputSeq, StateSeq};
use crate::error::{shape_err, Result};
use crate::linalg::Mat;
use crate::par;

/// Smallest `|Λ_m|` for which the inverse recurrence is used.
pub const LAMBDA_MIN: f64 = 1e-3;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// States stored at positions `0, K, 2K, …` and at `N`; position `p` holds
/// the state after `p` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanCheckpoints {
    interval: usize,
    positions: Vec<usize>,
    states: Vec<Vec<Complex64>>,
}

fn checkpoint_positions(n: usize, k: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..=n).step_by(k).collect();
    if *p.last().expect("position 0") != n {
        p.push(n);
    }
    p
}

impl ScanCheckpoints {
    /// Run the sequential recurrence and keep only checkpoint states.
    pub fn build(ssm: &DiagonalSSM, z: &Mat, interval: usize, x_init: Option<&[Complex64]>) -> Result<Self> {
        ssm.check_input(z)?;
        if interval == 0 {
            return Err(shape_err("checkpoint interval", ">= 1", 0));
        }
        let mut x = match x_init {
            Some(x) => {
                ssm.check_state(x)?;
                x.to_vec()
            }
            None => ssm.zero_state(),
        };
        let positions = checkpoint_positions(z.rows(), interval);
        let lambda = ssm.lambda();
        let mut states = vec![x.clone()];
        for w in positions.windows(2) {
            for t in w[0]..w[1] {
                step_with(&lambda, &ssm.b, &mut x, z.row(t));
            }
            states.push(x.clone());
        }
        Ok(Self {
            interval,
            positions,
            states,
        })
    }

    /// Pick checkpoints out of an already computed state sequence.
    pub fn from_states(states: &StateSeq, x_init: &[Complex64], interval: usize) -> Result<Self> {
        if interval == 0 {
            return Err(shape_err("checkpoint interval", ">= 1", 0));
        }
        if x_init.len() != states.m * states.w {
            return Err(shape_err("checkpoint initial state", states.m * states.w, x_init.len()));
        }
        let positions = checkpoint_positions(states.len(), interval);
        let stored = positions
            .iter()
            .map(|&p| if p == 0 { x_init.to_vec() } else { states.at(p - 1).to_vec() })
            .collect();
        Ok(Self {
            interval,
            positions,
            states: stored,
        })
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Stored state at `positions()[i]`.
    pub fn state(&self, i: usize) -> &[Complex64] {
        &self.states[i]
    }

    /// Complex entries held, for memory accounting.
    pub fn stored_len(&self) -> usize {
        self.states.iter().map(Vec::len).sum()
    }
}

/// Gradients of a scalar loss through one SSM.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmGrads {
    pub delta: Vec<f64>,
    pub log_neg_re_a: Vec<f64>,
    pub im_a: Vec<f64>,
    pub b: Vec<Complex64>,
    pub c: Vec<Complex64>,
    pub z: Mat,
    pub x_init: Vec<Complex64>,
}

/// `∂L/∂x` contributed directly by the readout at one step: `Cᴴ G`.
fn readout_adjoint(ssm: &DiagonalSSM, g: &[f64], out: &mut [Complex64]) {
    let (m, w) = (ssm.state_dim(), ssm.input_width);
    out.iter_mut().for_each(|o| *o = ZERO);
    for i in 0..m {
        let gi = &g[i * w..(i + 1) * w];
        for j in 0..m {
            let cc = ssm.c[i * m + j].conj();
            for (o, gv) in out[j * w..(j + 1) * w].iter_mut().zip(gi) {
                *o += cc * gv;
            }
        }
    }
}

struct SegmentPartial {
    g_lambda: Vec<Complex64>,
    g_b: Vec<Complex64>,
    g_c: Vec<Complex64>,
    g_z: Vec<f64>,
    /// `conj(Λ) λ_{lo+1}`, the gradient with respect to the left checkpoint.
    g_left: Vec<Complex64>,
}

struct Walk<'a> {
    ssm: &'a DiagonalSSM,
    lambda: &'a [Complex64],
    z: &'a Mat,
    upstream: &'a OutputSeq,
}

impl Walk<'_> {
    /// Adjoint at the first position of segment `(lo, hi]` assuming zero
    /// adjoint flows in from the right.
    fn local_adjoint(&self, lo: usize, hi: usize) -> Vec<Complex64> {
        let s = self.ssm.state_len();
        let w = self.ssm.input_width;
        let mut lam = vec![ZERO; s];
        let mut direct = vec![ZERO; s];
        for p in (lo + 1..=hi).rev() {
            readout_adjoint(self.ssm, self.upstream.at(p - 1), &mut direct);
            for i in 0..s {
                lam[i] = direct[i] + self.lambda[i / w].conj() * lam[i];
            }
        }
        lam
    }

    /// States `x_{lo}..=x_{hi}` of one segment, by inversion or recomputation.
    fn segment_states(&self, lo: usize, hi: usize, left: &[Complex64], right: &[Complex64]) -> Vec<Vec<Complex64>> {
        let w = self.ssm.input_width;
        let invertible = self.lambda.iter().all(|l| l.norm() >= LAMBDA_MIN);
        let mut xs = vec![Vec::new(); hi - lo + 1];
        xs[0] = left.to_vec();
        if invertible {
            let mut x = right.to_vec();
            xs[hi - lo] = right.to_vec();
            for p in (lo + 2..=hi).rev() {
                let zr = self.z.row(p - 1);
                for (i, v) in x.iter_mut().enumerate() {
                    *v = (*v - self.ssm.b[i / w] * zr[i % w]) / self.lambda[i / w];
                }
                xs[p - 1 - lo] = x.clone();
            }
        } else {
            let mut x = left.to_vec();
            for p in lo + 1..=hi {
                step_with(self.lambda, &self.ssm.b, &mut x, self.z.row(p - 1));
                xs[p - lo] = x.clone();
            }
        }
        xs
    }

    fn segment(&self, lo: usize, hi: usize, left: &[Complex64], right: &[Complex64], incoming: &[Complex64]) -> SegmentPartial {
        let (m, w) = (self.ssm.state_dim(), self.ssm.input_width);
        let s = m * w;
        let xs = self.segment_states(lo, hi, left, right);
        let mut part = SegmentPartial {
            g_lambda: vec![ZERO; m],
            g_b: vec![ZERO; m],
            g_c: vec![ZERO; m * m],
            g_z: vec![0.0; (hi - lo) * w],
            g_left: vec![ZERO; s],
        };
        let mut lam = incoming.to_vec();
        let mut direct = vec![ZERO; s];
        for p in (lo + 1..=hi).rev() {
            let g = self.upstream.at(p - 1);
            readout_adjoint(self.ssm, g, &mut direct);
            for i in 0..s {
                lam[i] = direct[i] + self.lambda[i / w].conj() * lam[i];
            }
            let (x, x_prev) = (&xs[p - lo], &xs[p - 1 - lo]);
            for i in 0..m {
                for j in 0..m {
                    let mut acc = ZERO;
                    for c in 0..w {
                        acc += g[i * w + c] * x[j * w + c].conj();
                    }
                    part.g_c[i * m + j] += acc;
                }
            }
            let zr = self.z.row(p - 1);
            let gz = &mut part.g_z[(p - 1 - lo) * w..(p - lo) * w];
            for j in 0..m {
                let bc = self.ssm.b[j].conj();
                for c in 0..w {
                    let l = lam[j * w + c];
                    part.g_lambda[j] += l * x_prev[j * w + c].conj();
                    part.g_b[j] += l * zr[c];
                    gz[c] += (l * bc).re;
                }
            }
        }
        for (i, (g, l)) in part.g_left.iter_mut().zip(&lam).enumerate() {
            *g = self.lambda[i / w].conj() * l;
        }
        part
    }
}

/// Backward through `y = Re(C x)` over the scan, using stored checkpoints.
/// `upstream` holds `∂L/∂y` for every position.
pub fn backward_from_checkpoints(ssm: &DiagonalSSM, z: &Mat, ckpt: &ScanCheckpoints, upstream: &OutputSeq) -> Result<SsmGrads> {
    ssm.check_input(z)?;
    let (n, m, w) = (z.rows(), ssm.state_dim(), ssm.input_width);
    if upstream.dims() != (n, m, w) {
        return Err(shape_err("SSM upstream gradient", format!("{:?}", (n, m, w)), format!("{:?}", upstream.dims())));
    }
    if *ckpt.positions.last().expect("nonempty") != n {
        return Err(shape_err("checkpoint length", n, ckpt.positions.last().copied().unwrap_or(0)));
    }
    let lambda = ssm.lambda();
    let walk = Walk {
        ssm,
        lambda: &lambda,
        z,
        upstream,
    };
    let s = m * w;
    let segs: Vec<(usize, usize)> = ckpt.positions.windows(2).map(|p| (p[0], p[1])).collect();

    let local = par::map_slice(&segs, |&(lo, hi)| walk.local_adjoint(lo, hi));
    let mut incoming = vec![vec![ZERO; s]; segs.len()];
    for k in (0..segs.len()).rev() {
        if k + 1 < segs.len() {
            let (lo, hi) = segs[k + 1];
            let len = (hi - lo) as i32;
            let right_in = incoming[k + 1].clone();
            incoming[k] = (0..s)
                .map(|i| local[k + 1][i] + lambda[i / w].conj().powi(len) * right_in[i])
                .collect();
        }
    }

    let idx: Vec<usize> = (0..segs.len()).collect();
    let parts = par::map_slice(&idx, |&k| {
        let (lo, hi) = segs[k];
        walk.segment(lo, hi, &ckpt.states[k], &ckpt.states[k + 1], &incoming[k])
    });

    let mut g_lambda = vec![ZERO; m];
    let mut b = vec![ZERO; m];
    let mut c = vec![ZERO; m * m];
    let mut gz = Vec::with_capacity(n * w);
    for p in &parts {
        g_lambda.iter_mut().zip(&p.g_lambda).for_each(|(a, x)| *a += x);
        b.iter_mut().zip(&p.g_b).for_each(|(a, x)| *a += x);
        c.iter_mut().zip(&p.g_c).for_each(|(a, x)| *a += x);
        gz.extend_from_slice(&p.g_z);
    }
    let x_init = parts.first().map_or_else(|| ssm.zero_state(), |p| p.g_left.clone());

    let a = ssm.a();
    let mut delta = vec![0.0; m];
    let mut log_neg_re_a = vec![0.0; m];
    let mut im_a = vec![0.0; m];
    for j in 0..m {
        let gl = g_lambda[j].conj();
        let dl = ssm.delta[j] * lambda[j];
        delta[j] = (gl * a[j] * lambda[j]).re;
        log_neg_re_a[j] = (gl * dl * a[j].re).re;
        im_a[j] = (gl * dl * Complex64::i()).re;
    }
    Ok(SsmGrads {
        delta,
        log_neg_re_a,
        im_a,
        b,
        c,
        z: Mat::from_vec(n, w, gz)?,
        x_init,
    })
}

/// Checkpoint every `interval` positions from a zero initial state, then run
/// [`backward_from_checkpoints`].
pub fn backward_checkpointed(ssm: &DiagonalSSM, z: &Mat, upstream: &OutputSeq, interval: usize) -> Result<SsmGrads> {
    let ckpt = ScanCheckpoints::build(ssm, z, interval, None)?;
    backward_from_checkpoints(ssm, z, &ckpt, upstream)
}

/// Store-all backward over a full state sequence.
pub fn backward_from_states(ssm: &DiagonalSSM, z: &Mat, states: &StateSeq, x_init: &[Complex64], upstream: &OutputSeq) -> Result<SsmGrads> {
    let ckpt = ScanCheckpoints::from_states(states, x_init, 1)?;
    backward_from_checkpoints(ssm, z, &ckpt, upstream)
}
