//! Complex-diagonal state-space model.
//!
//! One model drives every channel of its input: the state is an `M × W`
//! complex matrix updated as `x_t = Λ ⊙ x_{t−1} + B z_tᵀ`, with `Λ = exp(ΔA)`
//! and `B` a single complex `M`-vector. The readout `y_t = Re(C x_t)` is an
//! `M × W` real matrix.

mod backward;
mod scan;

pub use backward::{backward_checkpointed, backward_from_checkpoints, backward_from_states, ScanCheckpoints, SsmGrads, LAMBDA_MIN};
pub use scan::{combine, scan, scan_chunkwise, scan_fft, scan_prefix, scan_sequential, step};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};
use crate::linalg::Mat;

/// Lower end of the log-uniform step-size range.
pub const DELTA_MIN: f64 = 1e-3;
/// Upper end of the log-uniform step-size range.
pub const DELTA_MAX: f64 = 1e-1;

/// `(A, Δ)` with `Re A = −1/2`, `Im A_n = (M/π)(M/(2n+1) − 1)` and `Δ`
/// log-uniform in `[DELTA_MIN, DELTA_MAX]`.
pub fn s4d_inv_init<R: Rng + ?Sized>(m: usize, rng: &mut R) -> (Vec<Complex64>, Vec<f64>) {
    let mf = m as f64;
    let a = (0..m)
        .map(|n| Complex64::new(-0.5, mf / std::f64::consts::PI * (mf / (2 * n + 1) as f64 - 1.0)))
        .collect();
    let (lo, hi) = (DELTA_MIN.ln(), DELTA_MAX.ln());
    let delta = (0..m).map(|_| rng.random_range(lo..=hi).exp()).collect();
    (a, delta)
}

/// `Λ = exp(Δ ⊙ A)`.
pub fn discretize(a: &[Complex64], delta: &[f64]) -> Vec<Complex64> {
    a.iter().zip(delta).map(|(a, d)| (a * d).exp()).collect()
}

/// Parameters of one diagonal SSM.
///
/// `A` is stored as `(log(−Re A), Im A)` so its real part stays negative
/// under any update. `Λ` is derived on demand and never cached.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalSSM {
    pub delta: Vec<f64>,
    pub log_neg_re_a: Vec<f64>,
    pub im_a: Vec<f64>,
    pub b: Vec<Complex64>,
    /// `M × M`, row-major.
    pub c: Vec<Complex64>,
    pub input_width: usize,
}

impl DiagonalSSM {
    pub fn new(a: &[Complex64], delta: Vec<f64>, b: Vec<Complex64>, c: Vec<Complex64>, input_width: usize) -> Result<Self> {
        let m = a.len();
        if delta.len() != m {
            return Err(shape_err("DiagonalSSM delta", m, delta.len()));
        }
        if b.len() != m {
            return Err(shape_err("DiagonalSSM B", m, b.len()));
        }
        if c.len() != m * m {
            return Err(shape_err("DiagonalSSM C", m * m, c.len()));
        }
        if let Some(bad) = a.iter().position(|a| a.re >= 0.0) {
            return Err(shape_err("DiagonalSSM Re(A) < 0", "negative real part", format!("A[{bad}] = {}", a[bad])));
        }
        Ok(Self {
            delta,
            log_neg_re_a: a.iter().map(|a| (-a.re).ln()).collect(),
            im_a: a.iter().map(|a| a.im).collect(),
            b,
            c,
            input_width,
        })
    }

    /// S4D-Inv poles and steps, `B = 1`, `C` complex normal with variance `1/M`.
    pub fn init<R: Rng + ?Sized>(m: usize, input_width: usize, rng: &mut R) -> Self {
        let (a, delta) = s4d_inv_init(m, rng);
        let scale = (0.5 / m as f64).sqrt();
        let c = (0..m * m)
            .map(|_| {
                Complex64::new(
                    scale * rng.sample::<f64, _>(StandardNormal),
                    scale * rng.sample::<f64, _>(StandardNormal),
                )
            })
            .collect();
        Self::new(&a, delta, vec![Complex64::new(1.0, 0.0); m], c, input_width).expect("consistent init shapes")
    }

    pub fn state_dim(&self) -> usize {
        self.delta.len()
    }

    pub fn a(&self) -> Vec<Complex64> {
        self.log_neg_re_a
            .iter()
            .zip(&self.im_a)
            .map(|(l, w)| Complex64::new(-l.exp(), *w))
            .collect()
    }

    pub fn lambda(&self) -> Vec<Complex64> {
        discretize(&self.a(), &self.delta)
    }

    /// Length of one state: `M × W`.
    pub fn state_len(&self) -> usize {
        self.state_dim() * self.input_width
    }

    pub fn zero_state(&self) -> Vec<Complex64> {
        vec![Complex64::new(0.0, 0.0); self.state_len()]
    }

    pub(crate) fn check_input(&self, z: &Mat) -> Result<()> {
        if z.cols() != self.input_width {
            return Err(shape_err("SSM input width", self.input_width, z.cols()));
        }
        Ok(())
    }

    pub(crate) fn check_state(&self, x: &[Complex64]) -> Result<()> {
        if x.len() != self.state_len() {
            return Err(shape_err("SSM state length", self.state_len(), x.len()));
        }
        Ok(())
    }

    /// `Re(C x)` for one `M × W` state.
    pub fn readout_state(&self, x: &[Complex64], out: &mut [f64]) {
        let (m, w) = (self.state_dim(), self.input_width);
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..m {
            let row = &mut out[i * w..(i + 1) * w];
            for j in 0..m {
                let cij = self.c[i * m + j];
                for (o, xj) in row.iter_mut().zip(&x[j * w..(j + 1) * w]) {
                    *o += cij.re * xj.re - cij.im * xj.im;
                }
            }
        }
    }

    /// Readout of every state in the sequence.
    pub fn readout(&self, states: &StateSeq) -> OutputSeq {
        let len = self.state_len();
        let mut data = vec![0.0; states.len() * len];
        crate::par::for_each_chunk_mut(&mut data, len.max(1), |t, out| self.readout_state(states.at(t), out));
        OutputSeq {
            n: states.len(),
            m: self.state_dim(),
            w: self.input_width,
            data,
        }
    }
}

/// `N` complex `M × W` states, contiguous and row-major within a step.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSeq {
    pub(crate) n: usize,
    pub(crate) m: usize,
    pub(crate) w: usize,
    pub(crate) data: Vec<Complex64>,
}

impl StateSeq {
    pub fn zeros(n: usize, m: usize, w: usize) -> Self {
        Self {
            n,
            m,
            w,
            data: vec![Complex64::new(0.0, 0.0); n * m * w],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// State after `t + 1` tokens.
    pub fn at(&self, t: usize) -> &[Complex64] {
        let s = self.m * self.w;
        &self.data[t * s..(t + 1) * s]
    }

    pub fn last(&self) -> Option<&[Complex64]> {
        (self.n > 0).then(|| self.at(self.n - 1))
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }
}

/// `N` real `M × W` readouts.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputSeq {
    pub(crate) n: usize,
    pub(crate) m: usize,
    pub(crate) w: usize,
    pub(crate) data: Vec<f64>,
}

impl OutputSeq {
    pub fn zeros(n: usize, m: usize, w: usize) -> Self {
        Self {
            n,
            m,
            w,
            data: vec![0.0; n * m * w],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.m, self.w)
    }

    pub fn at(&self, t: usize) -> &[f64] {
        let s = self.m * self.w;
        &self.data[t * s..(t + 1) * s]
    }

    pub fn at_mut(&mut self, t: usize) -> &mut [f64] {
        let s = self.m * self.w;
        &mut self.data[t * s..(t + 1) * s]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}
