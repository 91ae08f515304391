//! Exact-basis interdomain attention.
//!
//! Key features and values are projected onto an orthonormal basis sampled
//! on the uniform grid `t_n = n`, and queries read the projected state. With a
//! complete basis (`M = N`) the readout reproduces feature attention exactly,
//! which is what makes this path an oracle for the learned layer.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{dot, Mat};
use crate::par;

/// Orthonormality tolerance for `Φ Φᵀ = I`.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    Indicator,
    DiscreteLegendre,
    Custom,
}

/// `M × N` matrix whose row `m` is basis function `φ_m` sampled at `t_1..t_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteBasis {
    phi: Mat,
    kind: BasisKind,
}

impl DiscreteBasis {
    /// `Φ = I_N`: every token is its own basis function.
    pub fn indicator(n: usize) -> Self {
        Self {
            phi: Mat::identity(n),
            kind: BasisKind::Indicator,
        }
    }

    /// First `m` discrete orthonormal polynomials on `n` uniform grid points.
    ///
    /// Built by Gram–Schmidt on the Krylov sequence `1, t·φ_0, t·φ_1, …`,
    /// which spans the same nested spaces as the monomials `1, t, t², …` but
    /// stays well conditioned up to `m = n`. Each new row is orthogonalized
    /// twice against its predecessors.
    pub fn discrete_legendre(m: usize, n: usize) -> Result<Self> {
        if m == 0 || m > n {
            return Err(shape_err("discrete_legendre", format!("1 <= M <= N = {n}"), m));
        }
        let grid: Vec<f64> = (0..n)
            .map(|i| if n == 1 { 0.0 } else { 2.0 * i as f64 / (n - 1) as f64 - 1.0 })
            .collect();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut v = vec![1.0; n];
        for k in 0..m {
            if k > 0 {
                v = rows[k - 1].iter().zip(&grid).map(|(p, t)| p * t).collect();
            }
            for _pass in 0..2 {
                for prev in &rows {
                    let c = dot(prev, &v);
                    v.iter_mut().zip(prev).for_each(|(x, p)| *x -= c * p);
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm == 0.0 {
                return Err(Error::Unsupported(format!("degenerate Legendre row {k}")));
            }
            // sign convention: positive at the right end of the grid
            let sign = if v[n - 1] < 0.0 { -1.0 } else { 1.0 };
            rows.push(v.iter().map(|x| sign * x / norm).collect());
        }
        let basis = Self {
            phi: Mat::from_rows(&rows)?,
            kind: BasisKind::DiscreteLegendre,
        };
        basis.check_orthonormal()?;
        Ok(basis)
    }

    /// Any row-orthonormal `M × N` matrix.
    pub fn custom(phi: Mat) -> Result<Self> {
        let basis = Self {
            phi,
            kind: BasisKind::Custom,
        };
        basis.check_orthonormal()?;
        Ok(basis)
    }

    fn check_orthonormal(&self) -> Result<()> {
        let err = self.orthonormality_error();
        if err > ORTHONORMAL_TOL {
            return Err(Error::Unsupported(format!(
                "basis rows not orthonormal (max |ΦΦᵀ − I| = {err:.3e})"
            )));
        }
        Ok(())
    }

    /// `max |Φ Φᵀ − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let m = self.phi.rows();
        let mut worst = 0.0_f64;
        for i in 0..m {
            for j in 0..m {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(self.phi.row(i), self.phi.row(j)) - target).abs());
            }
        }
        worst
    }

    pub fn num_functions(&self) -> usize {
        self.phi.rows()
    }

    pub fn len(&self) -> usize {
        self.phi.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.cols() == 0
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn matrix(&self) -> &Mat {
        &self.phi
    }
}

/// Projected key features `U` (`M × R`), values `Γ` (`M × d`) and the
/// projection of the constant function `η` (`M`).
#[derive(Clone, Debug, PartialEq)]
pub struct InterdomainState {
    pub u: Mat,
    pub gamma: Mat,
    pub eta: Vec<f64>,
}

/// `U = Φ F_k`, `Γ = Φ V`, `η = Φ 1`.
pub fn project(keys_feat: &Mat, values: &Mat, basis: &DiscreteBasis) -> Result<InterdomainState> {
    let n = basis.len();
    if keys_feat.rows() != n {
        return Err(shape_err("project keys", n, keys_feat.rows()));
    }
    if values.rows() != n {
        return Err(shape_err("project values", n, values.rows()));
    }
    let phi = basis.matrix();
    Ok(InterdomainState {
        u: phi.matmul(keys_feat)?,
        gamma: phi.matmul(values)?,
        eta: (0..phi.rows()).map(|m| phi.row(m).iter().sum()).collect(),
    })
}

/// Per-query scores `s = U ξ(q)` against every basis function.
fn basis_scores(q: &[f64], u: &Mat) -> Vec<f64> {
    (0..u.rows()).map(|m| dot(q, u.row(m))).collect()
}

fn check_readout(q_feat: &Mat, state: &InterdomainState) -> Result<()> {
    if q_feat.cols() != state.u.cols() {
        return Err(shape_err("readout feature width", state.u.cols(), q_feat.cols()));
    }
    Ok(())
}

/// `(F_q Uᵀ Γ) / (F_q Uᵀ η)`, the division broadcast across value columns.
pub fn readout_nw(q_feat: &Mat, state: &InterdomainState) -> Result<Mat> {
    check_readout(q_feat, state)?;
    let d = state.gamma.cols();
    let mut out = Mat::zeros(q_feat.rows(), d);
    for i in 0..q_feat.rows() {
        let s = basis_scores(q_feat.row(i), &state.u);
        let den = dot(&s, &state.eta);
        if den == 0.0 || !den.is_finite() {
            return Err(Error::ZeroDenominator { row: i });
        }
        let row = out.row_mut(i);
        for (m, sm) in s.iter().enumerate() {
            for (o, g) in row.iter_mut().zip(state.gamma.row(m)) {
                *o += sm * g;
            }
        }
        row.iter_mut().for_each(|o| *o /= den);
    }
    Ok(out)
}

/// `F_q Uᵀ Γ` without the normalizer.
pub fn readout_free(q_feat: &Mat, state: &InterdomainState) -> Result<Mat> {
    check_readout(q_feat, state)?;
    let d = state.gamma.cols();
    let mut out = Mat::zeros(q_feat.rows(), d);
    for i in 0..q_feat.rows() {
        let s = basis_scores(q_feat.row(i), &state.u);
        let row = out.row_mut(i);
        for (m, sm) in s.iter().enumerate() {
            for (o, g) in row.iter_mut().zip(state.gamma.row(m)) {
                *o += sm * g;
            }
        }
    }
    Ok(out)
}

/// Rule for building the basis over each prefix `1..=i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BasisFamily {
    Indicator,
    /// `min(max_functions, i)` Legendre rows over the prefix grid.
    DiscreteLegendre { max_functions: usize },
}

impl BasisFamily {
    pub fn for_prefix(&self, len: usize) -> Result<DiscreteBasis> {
        match *self {
            BasisFamily::Indicator => Ok(DiscreteBasis::indicator(len)),
            BasisFamily::DiscreteLegendre { max_functions } => {
                DiscreteBasis::discrete_legendre(max_functions.min(len), len)
            }
        }
    }
}

/// State at every position `i` (1-based prefix length `i + 1`), each equal to
/// [`project`] over that prefix alone.
pub fn causal_project(keys_feat: &Mat, values: &Mat, family: &BasisFamily) -> Result<Vec<InterdomainState>> {
    let n = keys_feat.rows();
    if values.rows() != n {
        return Err(shape_err("causal_project values", n, values.rows()));
    }
    par::map_range(n, |i| {
        let basis = family.for_prefix(i + 1)?;
        project(&keys_feat.slice_rows(0, i + 1), &values.slice_rows(0, i + 1), &basis)
    })
    .into_iter()
    .collect()
}
