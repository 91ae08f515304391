//! Exact quadratic attention: the ground truth every compressed path is
//! checked against.

use crate::error::{shape_err, Error, Result};
use crate::features::FeatureMap;
use crate::linalg::{dot, Mat};
use crate::par;

#[derive(Clone, Debug)]
pub struct AttentionInputs {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Query `i` sees keys `0..=i` only; requires as many queries as keys.
    pub causal: bool,
}

impl AttentionInputs {
    fn check(&self) -> Result<()> {
        if self.k.rows() != self.v.rows() {
            return Err(shape_err("attention keys/values", self.k.rows(), self.v.rows()));
        }
        if self.causal && self.q.rows() != self.k.rows() {
            return Err(shape_err("causal attention queries", self.k.rows(), self.q.rows()));
        }
        Ok(())
    }

    fn visible(&self, i: usize) -> usize {
        if self.causal {
            i + 1
        } else {
            self.k.rows()
        }
    }
}

fn rows_to_mat(rows: Vec<Vec<f64>>, cols: usize) -> Mat {
    let n = rows.len();
    Mat::from_vec(n, cols, rows.into_iter().flatten().collect()).expect("row widths agree")
}

/// Softmax attention with kernel `exp(qᵀk / √d)`, stabilized by subtracting
/// the row maximum of the scores.
pub fn softmax_attention(inputs: &AttentionInputs) -> Result<Mat> {
    inputs.check()?;
    if inputs.q.cols() != inputs.k.cols() {
        return Err(shape_err("softmax_attention q/k width", inputs.k.cols(), inputs.q.cols()));
    }
    let d = inputs.v.cols();
    let inv_sqrt = 1.0 / (inputs.q.cols() as f64).sqrt();
    let rows = par::map_range(inputs.q.rows(), |i| {
        let q = inputs.q.row(i);
        let n = inputs.visible(i);
        let scores: Vec<f64> = (0..n).map(|j| dot(q, inputs.k.row(j)) * inv_sqrt).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0.0; d];
        let mut total = 0.0;
        for (j, s) in scores.iter().enumerate() {
            let w = (s - max).exp();
            total += w;
            for (o, vj) in out.iter_mut().zip(inputs.v.row(j)) {
                *o += w * vj;
            }
        }
        out.iter_mut().for_each(|o| *o /= total);
        out
    });
    Ok(rows_to_mat(rows, d))
}

/// Kernel regression with the feature kernel `ξ(q)ᵀξ(k)`, by explicit double
/// summation over query and key positions.
pub fn feature_attention(inputs: &AttentionInputs, feature_map: &FeatureMap) -> Result<Mat> {
    inputs.check()?;
    let fq = feature_map.apply(&inputs.q)?;
    let fk = feature_map.apply(&inputs.k)?;
    feature_attention_from_features(&fq, &fk, &inputs.v, inputs.causal)
}

/// [`feature_attention`] on precomputed query and key features.
pub fn feature_attention_from_features(fq: &Mat, fk: &Mat, v: &Mat, causal: bool) -> Result<Mat> {
    if fq.cols() != fk.cols() {
        return Err(shape_err("feature_attention feature width", fk.cols(), fq.cols()));
    }
    if fk.rows() != v.rows() {
        return Err(shape_err("feature_attention keys/values", fk.rows(), v.rows()));
    }
    if causal && fq.rows() != fk.rows() {
        return Err(shape_err("causal feature_attention queries", fk.rows(), fq.rows()));
    }
    let d = v.cols();
    let rows = par::map_range(fq.rows(), |i| {
        let n = if causal { i + 1 } else { fk.rows() };
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for j in 0..n {
            let w = dot(fq.row(i), fk.row(j));
            den += w;
            for (o, vj) in num.iter_mut().zip(v.row(j)) {
                *o += w * vj;
            }
        }
        if den == 0.0 || !den.is_finite() {
            return Err(Error::ZeroDenominator { row: i });
        }
        Ok(num.into_iter().map(|x| x / den).collect::<Vec<f64>>())
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(rows_to_mat(rows, d))
}
