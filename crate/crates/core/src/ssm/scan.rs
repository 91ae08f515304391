//! Forward backends. All four return the full state sequence and accept an
//! optional initial state, so a prefill can resume from a decode session.

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::{DiagonalSSM, StateSeq};
use crate::config::Backend;
use crate::error::{shape_err, Result};
use crate::linalg::Mat;
use crate::par;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Dispatch to the selected backend. `chunk` is used by the chunkwise scan only.
pub fn scan(ssm: &DiagonalSSM, z: &Mat, backend: Backend, chunk: usize, x_init: Option<&[Complex64]>) -> Result<StateSeq> {
    match backend {
        Backend::Sequential => scan_sequential(ssm, z, x_init),
        Backend::Fft => scan_fft(ssm, z, x_init),
        Backend::Chunkwise => scan_chunkwise(ssm, z, chunk, x_init),
        Backend::ParallelPrefix => scan_prefix(ssm, z, x_init),
    }
}

fn prepare(ssm: &DiagonalSSM, z: &Mat, x_init: Option<&[Complex64]>) -> Result<Vec<Complex64>> {
    ssm.check_input(z)?;
    match x_init {
        Some(x) => {
            ssm.check_state(x)?;
            Ok(x.to_vec())
        }
        None => Ok(ssm.zero_state()),
    }
}

#[inline]
pub(crate) fn step_with(lambda: &[Complex64], b: &[Complex64], x: &mut [Complex64], z_row: &[f64]) {
    let w = z_row.len();
    for (j, (l, bj)) in lambda.iter().zip(b).enumerate() {
        for (xc, zc) in x[j * w..(j + 1) * w].iter_mut().zip(z_row) {
            *xc = l * *xc + bj * zc;
        }
    }
}

/// One recurrence step applied in place.
pub fn step(ssm: &DiagonalSSM, x: &mut [Complex64], z_row: &[f64]) -> Result<()> {
    ssm.check_state(x)?;
    if z_row.len() != ssm.input_width {
        return Err(shape_err("SSM step input width", ssm.input_width, z_row.len()));
    }
    step_with(&ssm.lambda(), &ssm.b, x, z_row);
    Ok(())
}

/// The recurrence, one token at a time.
pub fn scan_sequential(ssm: &DiagonalSSM, z: &Mat, x_init: Option<&[Complex64]>) -> Result<StateSeq> {
    let mut x = prepare(ssm, z, x_init)?;
    let lambda = ssm.lambda();
    let (n, m, w) = (z.rows(), ssm.state_dim(), ssm.input_width);
    let mut out = StateSeq::zeros(n, m, w);
    let s = m * w;
    for t in 0..n {
        step_with(&lambda, &ssm.b, &mut x, z.row(t));
        out.data[t * s..(t + 1) * s].copy_from_slice(&x);
    }
    Ok(out)
}

/// Causal convolution of every input channel with the kernel `Λ_j^τ`,
/// evaluated by zero-padded FFT of length `next_pow2(2N)`.
pub fn scan_fft(ssm: &DiagonalSSM, z: &Mat, x_init: Option<&[Complex64]>) -> Result<StateSeq> {
    let x0 = prepare(ssm, z, x_init)?;
    let lambda = ssm.lambda();
    let (n, m, w) = (z.rows(), ssm.state_dim(), ssm.input_width);
    let mut out = StateSeq::zeros(n, m, w);
    if n == 0 {
        return Ok(out);
    }
    let len = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let scale = 1.0 / len as f64;

    let z_hat: Vec<Vec<Complex64>> = par::map_range(w, |c| {
        let mut buf = vec![ZERO; len];
        for t in 0..n {
            buf[t] = Complex64::new(z[(t, c)], 0.0);
        }
        fwd.process(&mut buf);
        buf
    });

    // per mode j: the n × w block of B_j (k_j * z)[t, c] + Λ_j^{t+1} x0[j, c]
    let blocks: Vec<Vec<Complex64>> = par::map_range(m, |j| {
        let mut kernel = vec![ZERO; len];
        let mut p = Complex64::new(1.0, 0.0);
        for k in kernel.iter_mut().take(n) {
            *k = p;
            p *= lambda[j];
        }
        fwd.process(&mut kernel);
        let mut block = vec![ZERO; n * w];
        let mut buf = vec![ZERO; len];
        for c in 0..w {
            for ((o, k), zc) in buf.iter_mut().zip(&kernel).zip(&z_hat[c]) {
                *o = k * zc;
            }
            inv.process(&mut buf);
            for t in 0..n {
                block[t * w + c] = ssm.b[j] * (buf[t] * scale);
            }
        }
        let mut p = lambda[j];
        for t in 0..n {
            for c in 0..w {
                block[t * w + c] += p * x0[j * w + c];
            }
            p *= lambda[j];
        }
        block
    });

    let s = m * w;
    for (j, block) in blocks.iter().enumerate() {
        for t in 0..n {
            out.data[t * s + j * w..t * s + (j + 1) * w].copy_from_slice(&block[t * w..(t + 1) * w]);
        }
    }
    Ok(out)
}

/// Chunk-parallel scan: local states from zero inside each chunk, a serial
/// pass carrying chunk-end states across boundaries, then a parallel
/// correction adding `Λ^{r+1}` times the incoming carry.
pub fn scan_chunkwise(ssm: &DiagonalSSM, z: &Mat, chunk: usize, x_init: Option<&[Complex64]>) -> Result<StateSeq> {
    let x0 = prepare(ssm, z, x_init)?;
    let n = z.rows();
    if chunk == 0 || (n > 0 && chunk > n) {
        return Err(shape_err("chunkwise chunk size", format!("1..={n}"), chunk));
    }
    let lambda = ssm.lambda();
    let (m, w) = (ssm.state_dim(), ssm.input_width);
    let s = m * w;
    let mut out = StateSeq::zeros(n, m, w);
    if n == 0 {
        return Ok(out);
    }

    par::for_each_chunk_mut(&mut out.data, chunk * s, |ci, block| {
        let mut x = vec![ZERO; s];
        for (r, dst) in block.chunks_mut(s).enumerate() {
            step_with(&lambda, &ssm.b, &mut x, z.row(ci * chunk + r));
            dst.copy_from_slice(&x);
        }
    });

    // powers[r] = Λ^{r+1}
    let mut powers = Vec::with_capacity(chunk);
    let mut p = lambda.clone();
    for _ in 0..chunk {
        powers.push(p.clone());
        p.iter_mut().zip(&lambda).for_each(|(a, l)| *a *= l);
    }

    let n_chunks = n.div_ceil(chunk);
    let mut carries_in = Vec::with_capacity(n_chunks);
    let mut carry = x0;
    for ci in 0..n_chunks {
        let last = ((ci + 1) * chunk).min(n) - 1;
        let rows = last + 1 - ci * chunk;
        let local_end = &out.data[last * s..(last + 1) * s];
        let next: Vec<Complex64> = (0..s).map(|i| local_end[i] + powers[rows - 1][i / w] * carry[i]).collect();
        carries_in.push(carry);
        carry = next;
    }

    par::for_each_chunk_mut(&mut out.data, chunk * s, |ci, block| {
        let cin = &carries_in[ci];
        if cin.iter().all(|c| *c == ZERO) {
            return;
        }
        for (r, dst) in block.chunks_mut(s).enumerate() {
            for (i, x) in dst.iter_mut().enumerate() {
                *x += powers[r][i / w] * cin[i];
            }
        }
    });
    Ok(out)
}

/// Associative operator of the linear recurrence: applying `(a₁, b₁)` then
/// `(a₂, b₂)` to a state equals applying `(a₁a₂, a₂b₁ + b₂)`.
pub fn combine(first: (Complex64, Complex64), second: (Complex64, Complex64)) -> (Complex64, Complex64) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

/// Hillis–Steele inclusive scan over `(Λ, B z_t)` pairs, each level
/// parallel over positions.
pub fn scan_prefix(ssm: &DiagonalSSM, z: &Mat, x_init: Option<&[Complex64]>) -> Result<StateSeq> {
    let x0 = prepare(ssm, z, x_init)?;
    let lambda = ssm.lambda();
    let (n, m, w) = (z.rows(), ssm.state_dim(), ssm.input_width);
    let s = m * w;
    let mut a: Vec<Complex64> = (0..n).flat_map(|_| lambda.iter().copied()).collect();
    let mut b = vec![ZERO; n * s];
    par::for_each_chunk_mut(&mut b, s.max(1), |t, bt| {
        let zt = z.row(t);
        for j in 0..m {
            for c in 0..w {
                bt[j * w + c] = ssm.b[j] * zt[c];
            }
        }
    });
    if n > 0 {
        for (i, bi) in b[..s].iter_mut().enumerate() {
            *bi = combine((ZERO, x0[i]), (lambda[i / w], *bi)).1;
        }
    }

    let mut offset = 1;
    while offset < n {
        let mut a_next = a.clone();
        let mut b_next = b.clone();
        par::for_each_chunk_mut(&mut b_next, s.max(1), |t, bt| {
            if t < offset {
                return;
            }
            let (ae, be) = (&a[(t - offset) * m..(t - offset + 1) * m], &b[(t - offset) * s..(t - offset + 1) * s]);
            let (al, bl) = (&a[t * m..(t + 1) * m], &b[t * s..(t + 1) * s]);
            for i in 0..s {
                bt[i] = combine((ae[i / w], be[i]), (al[i / w], bl[i])).1;
            }
        });
        par::for_each_chunk_mut(&mut a_next, m.max(1), |t, at| {
            if t < offset {
                return;
            }
            for j in 0..m {
                at[j] = a[(t - offset) * m + j] * a[t * m + j];
            }
        });
        a = a_next;
        b = b_next;
        offset *= 2;
    }
    Ok(StateSeq { n, m, w, data: b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::rng_from_seed;
    use crate::linalg::rel_error;
    use rand::Rng;

    fn random_ssm(m: usize, w: usize, seed: u64) -> DiagonalSSM {
        let mut rng = rng_from_seed(seed);
        let mut ssm = DiagonalSSM::init(m, w, &mut rng);
        ssm.b = (0..m)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        ssm
    }

    fn outputs(ssm: &DiagonalSSM, st: &StateSeq) -> Vec<f64> {
        ssm.readout(st).data
    }

    /// Unrolled closed form `x_t = Σ_{n≤t} Λ^{t−n} B z_n`, written without the
    /// production step function.
    fn naive_states(ssm: &DiagonalSSM, z: &Mat) -> Vec<Complex64> {
        let lam = ssm.lambda();
        let (n, m, w) = (z.rows(), ssm.state_dim(), ssm.input_width);
        let mut out = vec![ZERO; n * m * w];
        for t in 0..n {
            for j in 0..m {
                for c in 0..w {
                    let mut acc = ZERO;
                    for k in 0..=t {
                        acc += lam[j].powu((t - k) as u32) * ssm.b[j] * z[(k, c)];
                    }
                    out[(t * m + j) * w + c] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn zero_input_and_single_step() {
        let ssm = random_ssm(4, 3, 1);
        let st = scan_sequential(&ssm, &Mat::zeros(5, 3), None).unwrap();
        assert!(st.data.iter().all(|x| *x == ZERO));
        let z = Mat::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let st = scan_sequential(&ssm, &z, None).unwrap();
        for j in 0..4 {
            for c in 0..3 {
                assert_eq!(st.at(0)[j * 3 + c], ssm.b[j] * z[(0, c)]);
            }
        }
    }

    #[test]
    fn sequential_matches_unrolled_loop() {
        let ssm = random_ssm(4, 2, 2);
        let z = Mat::random_normal(64, 2, 1.0, &mut rng_from_seed(3));
        let st = scan_sequential(&ssm, &z, None).unwrap();
        let naive = naive_states(&ssm, &z);
        let diff = st.data.iter().zip(&naive).fold(0.0_f64, |m, (a, b)| m.max((a - b).norm()));
        let scale = naive.iter().fold(0.0_f64, |m, a| m.max(a.norm()));
        assert!(diff / scale < 1e-12, "{}", diff / scale);
    }

    #[test]
    fn fft_impulse_response() {
        let ssm = random_ssm(3, 1, 4);
        let mut z = Mat::zeros(20, 1);
        z[(0, 0)] = 1.0;
        let y = ssm.readout(&scan_fft(&ssm, &z, None).unwrap());
        let lam = ssm.lambda();
        for t in 0..20 {
            for i in 0..3 {
                let mut acc = ZERO;
                for (j, l) in lam.iter().enumerate() {
                    acc += ssm.c[i * 3 + j] * l.powu(t as u32) * ssm.b[j];
                }
                assert!((y.at(t)[i] - acc.re).abs() < 1e-12);
            }
        }
        let zero = scan_fft(&ssm, &Mat::zeros(7, 1), None).unwrap();
        assert!(zero.data.iter().all(|x| x.norm() < 1e-300));
    }

    #[test]
    fn four_way_agreement() {
        for (n, m) in [(1, 1), (2, 4), (16, 4), (257, 4), (1024, 4), (16, 64), (257, 64), (1024, 1)] {
            let ssm = random_ssm(m, 3, n as u64 + m as u64);
            let z = Mat::random_normal(n, 3, 1.0, &mut rng_from_seed(n as u64));
            let reference = outputs(&ssm, &scan_sequential(&ssm, &z, None).unwrap());
            for backend in [Backend::Fft, Backend::Chunkwise, Backend::ParallelPrefix] {
                let got = outputs(&ssm, &scan(&ssm, &z, backend, 16.min(n), None).unwrap());
                let err = rel_error(&got, &reference);
                assert!(err < 1e-8, "{backend:?} n={n} m={m}: {err}");
            }
        }
    }

    #[test]
    fn chunkwise_edge_cases() {
        let ssm = random_ssm(4, 2, 5);
        let z = Mat::random_normal(100, 2, 1.0, &mut rng_from_seed(6));
        let seq = outputs(&ssm, &scan_sequential(&ssm, &z, None).unwrap());
        let full = outputs(&ssm, &scan_chunkwise(&ssm, &z, 100, None).unwrap());
        assert!(rel_error(&full, &seq) < 1e-12);
        let one = outputs(&ssm, &scan_chunkwise(&ssm, &z, 1, None).unwrap());
        assert!(rel_error(&one, &seq) < 1e-12);
        let ragged = outputs(&ssm, &scan_chunkwise(&ssm, &z, 16, None).unwrap());
        assert!(rel_error(&ragged, &seq) < 1e-10);
        assert!(scan_chunkwise(&ssm, &z, 0, None).is_err());
        assert!(scan_chunkwise(&ssm, &z, 101, None).is_err());
    }

    #[test]
    fn initial_state_is_honored_by_every_backend() {
        let ssm = random_ssm(4, 2, 7);
        let z = Mat::random_normal(40, 2, 1.0, &mut rng_from_seed(8));
        let full = scan_sequential(&ssm, &z, None).unwrap();
        let head = scan_sequential(&ssm, &z.slice_rows(0, 13), None).unwrap();
        let tail_ref = &full.data[13 * 8..];
        for backend in Backend::ALL {
            let tail = scan(&ssm, &z.slice_rows(13, 40), backend, 5, head.last()).unwrap();
            let diff = tail.data.iter().zip(tail_ref).fold(0.0_f64, |m, (a, b)| m.max((a - b).norm()));
            assert!(diff < 1e-10, "{backend:?}: {diff}");
        }
    }

    #[test]
    fn combine_identity_and_associativity() {
        let mut rng = rng_from_seed(9);
        let mut c = || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let one = (Complex64::new(1.0, 0.0), ZERO);
        for _ in 0..100 {
            let (p, q, r) = ((c(), c()), (c(), c()), (c(), c()));
            assert_eq!(combine(one, p), p);
            assert_eq!(combine(p, one), p);
            let left = combine(combine(p, q), r);
            let right = combine(p, combine(q, r));
            assert!((left.0 - right.0).norm() < 1e-12 && (left.1 - right.1).norm() < 1e-12);
        }
    }

    #[test]
    fn prefix_matches_sequential_n128() {
        let ssm = random_ssm(8, 2, 10);
        let z = Mat::random_normal(128, 2, 1.0, &mut rng_from_seed(11));
        let seq = outputs(&ssm, &scan_sequential(&ssm, &z, None).unwrap());
        let pre = outputs(&ssm, &scan_prefix(&ssm, &z, None).unwrap());
        assert!(rel_error(&pre, &seq) < 1e-10);
    }

    #[test]
    fn free_decay_is_bounded() {
        let ssm = random_ssm(6, 2, 12);
        let mut rng = rng_from_seed(13);
        let x0: Vec<Complex64> = (0..12)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let norm = |x: &[Complex64]| x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let rho = ssm.lambda().iter().fold(0.0_f64, |m, l| m.max(l.norm()));
        let st = scan_sequential(&ssm, &Mat::zeros(50, 2), Some(&x0)).unwrap();
        for t in 0..50 {
            assert!(norm(st.at(t)) <= rho.powi(t as i32 + 1) * norm(&x0) * (1.0 + 1e-12));
        }
    }
}
