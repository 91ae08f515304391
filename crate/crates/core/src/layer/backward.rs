use super::forward::{forward_with_cache, rope_rows, ForwardCache};
use super::{out_width, LayerParams};
use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::features::{rmsnorm_bias_backward, short_conv_backward, silu, silu_grad, silu_l2_backward};
use crate::linalg::{dot, Mat};
use crate::par;
use crate::ssm::{backward_from_checkpoints, OutputSeq};

/// Gradients of a scalar loss with respect to every parameter and the input.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub params: LayerParams,
    pub x: Mat,
}

fn add_into(acc: &mut Mat, other: &Mat) {
    acc.as_mut_slice().iter_mut().zip(other.as_slice()).for_each(|(a, b)| *a += b);
}

/// `gW = xᵀ g` and `gx += g Wᵀ` for `y = x W`.
fn linear_backward(x: &Mat, w: &Mat, g: &Mat, gx: &mut Mat) -> Result<Mat> {
    add_into(gx, &g.matmul(&w.transpose())?);
    x.transpose().matmul(g)
}

fn silu_l2_rows_backward(u: &Mat, g: &Mat, width: usize) -> Mat {
    let mut out = Mat::zeros(u.rows(), u.cols());
    for t in 0..u.rows() {
        for ((dst, us), gs) in out.row_mut(t).chunks_mut(width).zip(u.row(t).chunks(width)).zip(g.row(t).chunks(width)) {
            dst.copy_from_slice(&silu_l2_backward(us, gs));
        }
    }
    out
}

/// Reverse pass over a cached full-sequence forward.
pub fn backward_from_cache(params: &LayerParams, cache: &ForwardCache, upstream: &Mat, cfg: &ModelConfig) -> Result<LayerGrads> {
    let x = &cache.x;
    let (n, d) = x.shape();
    if upstream.shape() != (n, d) {
        return Err(shape_err("layer upstream gradient", format!("{n}x{d}"), format!("{}x{}", upstream.rows(), upstream.cols())));
    }
    let (h, r, dh, kv) = (cfg.heads, cfg.feature_dim, cfg.head_dim, cfg.n_kv);
    let w = cfg.input_width();
    let p = out_width(cfg);
    let mut grads = params.zeros_like();
    let mut gx = Mat::zeros(n, d);

    grads.w_o = cache.o_gated.transpose().matmul(upstream)?;
    let g_og = upstream.matmul(&params.w_o.transpose())?;
    let g_o = match (&cache.gate_pre, &params.w_g) {
        (Some(gp), Some(wg)) => {
            let g_gate = Mat::from_fn(n, p, |i, j| g_og[(i, j)] * cache.o[(i, j)] * silu_grad(gp[(i, j)]));
            grads.w_g = Some(linear_backward(x, wg, &g_gate, &mut gx)?);
            Mat::from_fn(n, p, |i, j| g_og[(i, j)] * silu(gp[(i, j)]))
        }
        _ => g_og,
    };

    // readout: gradients into each cell's SSM outputs (and the query features)
    let m = cfg.state_dim;
    let mut gq_feat = cache.q_feat.as_ref().map(|q| Mat::zeros(q.rows(), q.cols()));
    let per_cell = par::map_range(kv, |c| {
        let y = &cache.y[c];
        let mut gy = OutputSeq::zeros(n, m, w);
        let mut gq = Vec::new();
        let mut g_cout = vec![0.0; m];
        for t in 0..n {
            let yt = y.at(t);
            let gyt = gy.at_mut(t);
            if let Some(qf) = &cache.q_feat {
                for head in (0..h).filter(|&hd| cfg.cell_of_head(hd) == c) {
                    let q = &qf.row(t)[head * r..(head + 1) * r];
                    let go = &g_o.row(t)[head * dh..(head + 1) * dh];
                    let mut gq_h = vec![0.0; r];
                    for (ym, gym) in yt.chunks(w).zip(gyt.chunks_mut(w)) {
                        let s = dot(q, &ym[..r]);
                        let gs = dot(&ym[r..], go);
                        for (gv, g) in gym[r..].iter_mut().zip(go) {
                            *gv += s * g;
                        }
                        for ((gu, qv), (gqv, u)) in gym[..r].iter_mut().zip(q).zip(gq_h.iter_mut().zip(&ym[..r])) {
                            *gu += gs * qv;
                            *gqv += gs * u;
                        }
                    }
                    gq.push((t, head, gq_h));
                }
            } else {
                let c_out = params.cells[c].c_out.as_ref().expect("linear variant has c_out");
                let go = &g_o.row(t)[c * w..(c + 1) * w];
                for ((ym, gym), (cm, gc)) in yt.chunks(w).zip(gyt.chunks_mut(w)).zip(c_out.iter().zip(g_cout.iter_mut())) {
                    *gc += dot(ym, go);
                    for (gv, g) in gym.iter_mut().zip(go) {
                        *gv += cm * g;
                    }
                }
            }
        }
        (gy, gq, g_cout)
    });

    // SSM and input norms, per cell
    let mut g_kfeat = Mat::zeros(n, kv * r);
    let mut g_vin = Mat::zeros(n, kv * dh);
    let cell_grads = par::map_range(kv, |c| -> Result<_> {
        let cell = &params.cells[c];
        let sg = backward_from_checkpoints(&cell.ssm, &cache.z[c], &cache.ckpts[c], &per_cell[c].0)?;
        let mut gcell = grads.cells[c].clone();
        let mut gk = Mat::zeros(n, r);
        let mut gv = Mat::zeros(n, dh);
        for t in 0..n {
            let gz = sg.z.row(t);
            let k_in = &cache.k_feat.row(t)[c * r..(c + 1) * r];
            let v_in = &cache.v_in.row(t)[c * dh..(c + 1) * dh];
            gk.row_mut(t).copy_from_slice(&rmsnorm_bias_backward(k_in, &cell.norm_k, &gz[..r], &mut gcell.norm_k));
            gv.row_mut(t).copy_from_slice(&rmsnorm_bias_backward(v_in, &cell.norm_v, &gz[r..], &mut gcell.norm_v));
        }
        gcell.ssm.delta = sg.delta;
        gcell.ssm.log_neg_re_a = sg.log_neg_re_a;
        gcell.ssm.im_a = sg.im_a;
        gcell.ssm.b = sg.b;
        gcell.ssm.c = sg.c;
        if gcell.c_out.is_some() {
            gcell.c_out = Some(per_cell[c].2.clone());
        }
        Ok((gcell, gk, gv))
    });
    for (c, res) in cell_grads.into_iter().enumerate() {
        let (gcell, gk, gv) = res?;
        grads.cells[c] = gcell;
        for t in 0..n {
            g_kfeat.row_mut(t)[c * r..(c + 1) * r].copy_from_slice(gk.row(t));
            g_vin.row_mut(t)[c * dh..(c + 1) * dh].copy_from_slice(gv.row(t));
        }
    }
    if let Some(gq) = &mut gq_feat {
        for (_, list, _) in &per_cell {
            for (t, head, g) in list {
                gq.row_mut(*t)[head * r..(head + 1) * r].copy_from_slice(g);
            }
        }
    }

    // key (or a) stream
    let mut g_kconv = if cfg.variant.dual_kv() {
        silu_l2_rows_backward(&cache.k_rot, &g_kfeat, r)
    } else {
        g_kfeat
    };
    if cfg.rope_enabled {
        rope_rows(&mut g_kconv, r, 0, -1.0);
    }
    let (g_kpre, g_convk) = short_conv_backward(&cache.k_pre, &params.conv_k, &g_kconv);
    grads.conv_k = g_convk;
    grads.w_k = linear_backward(x, &params.w_k, &g_kpre, &mut gx)?;

    // value (or b) stream
    let g_vpre = match &params.conv_v {
        Some(kernel) => {
            let (g, gk) = short_conv_backward(&cache.v_pre, kernel, &g_vin);
            grads.conv_v = Some(gk);
            g
        }
        None => g_vin,
    };
    grads.w_v = linear_backward(x, &params.w_v, &g_vpre, &mut gx)?;

    // query stream
    if let (Some(gqf), Some(q_rot), Some(q_pre), Some(conv_q), Some(w_q)) =
        (&gq_feat, &cache.q_rot, &cache.q_pre, &params.conv_q, &params.w_q)
    {
        let mut g_qconv = silu_l2_rows_backward(q_rot, gqf, r);
        if cfg.rope_enabled {
            rope_rows(&mut g_qconv, r, 0, -1.0);
        }
        let (g_qpre, g_convq) = short_conv_backward(q_pre, conv_q, &g_qconv);
        grads.conv_q = Some(g_convq);
        grads.w_q = Some(linear_backward(x, w_q, &g_qpre, &mut gx)?);
    }

    Ok(LayerGrads { params: grads, x: gx })
}

/// Forward with retained checkpoints, then the reverse pass.
pub fn backward(params: &LayerParams, x: &Mat, upstream: &Mat, cfg: &ModelConfig) -> Result<LayerGrads> {
    let (_, cache) = forward_with_cache(params, x, cfg)?;
    backward_from_cache(params, &cache, upstream, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{rng_from_seed, Backend, Variant};
    use crate::layer::forward;
    use crate::linalg::grad_rel_error;

    fn tiny(variant: Variant, gate: bool, rope: bool) -> ModelConfig {
        ModelConfig {
            variant,
            output_gate_enabled: gate,
            rope_enabled: rope,
            chunk_size: 4,
            ..Default::default()
        }
    }

    fn loss(p: &LayerParams, x: &Mat, g: &Mat, c: &ModelConfig) -> f64 {
        dot(forward(p, x, c).unwrap().as_slice(), g.as_slice())
    }

    fn check_fd(c: &ModelConfig, seed: u64) {
        let mut rng = rng_from_seed(seed);
        let p = LayerParams::randomized(c, &mut rng);
        let x = Mat::random_normal(6, c.model_dim, 1.0, &mut rng);
        let g = Mat::random_normal(6, c.model_dim, 1.0, &mut rng);
        let grads = backward(&p, &x, &g, c).unwrap();
        let h = 1e-5;
        let flat = p.to_flat();
        let mut numeric = Vec::with_capacity(flat.len());
        for i in 0..flat.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            let mut fa = flat.clone();
            let mut fb = flat.clone();
            fa[i] += h;
            fb[i] -= h;
            a.set_flat(&fa).unwrap();
            b.set_flat(&fb).unwrap();
            numeric.push((loss(&a, &x, &g, c) - loss(&b, &x, &g, c)) / (2.0 * h));
        }
        let analytic = grads.params.to_flat();
        let err = grad_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "{:?} params: {err}", c.variant);
        let mut numeric_x = Vec::new();
        for i in 0..x.as_slice().len() {
            let mut a = x.clone();
            let mut b = x.clone();
            a.as_mut_slice()[i] += h;
            b.as_mut_slice()[i] -= h;
            numeric_x.push((loss(&p, &a, &g, c) - loss(&p, &b, &g, c)) / (2.0 * h));
        }
        let err = grad_rel_error(grads.x.as_slice(), &numeric_x);
        assert!(err < 1e-4, "{:?} input: {err}", c.variant);
    }

    #[test]
    fn finite_differences_every_variant() {
        for (i, v) in Variant::ALL.into_iter().enumerate() {
            check_fd(&tiny(v, true, true), 10 + i as u64);
            check_fd(&tiny(v, false, false), 20 + i as u64);
        }
    }

    #[test]
    fn finite_differences_grouped_kv() {
        for v in Variant::ALL {
            let c = ModelConfig {
                n_kv: 1,
                ..tiny(v, true, true)
            };
            check_fd(&c, 30);
        }
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let c = tiny(Variant::FullInterdomain, true, true);
        let mut rng = rng_from_seed(1);
        let p = LayerParams::randomized(&c, &mut rng);
        let x = Mat::random_normal(6, 8, 1.0, &mut rng);
        let g = backward(&p, &x, &Mat::zeros(6, 8), &c).unwrap();
        assert!(g.params.to_flat().iter().all(|&v| v == 0.0));
        assert!(g.x.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_independent_of_backend() {
        let c = tiny(Variant::FullInterdomain, true, true);
        let mut rng = rng_from_seed(2);
        let p = LayerParams::randomized(&c, &mut rng);
        let x = Mat::random_normal(6, 8, 1.0, &mut rng);
        let up = Mat::random_normal(6, 8, 1.0, &mut rng);
        let reference = backward(&p, &x, &up, &c).unwrap().params.to_flat();
        for b in Backend::ALL {
            let cb = ModelConfig { backend: b, ..c.clone() };
            let g = backward(&p, &x, &up, &cb).unwrap().params.to_flat();
            assert!(grad_rel_error(&g, &reference) < 1e-9, "{b:?}");
        }
    }

    #[test]
    fn s4d_only_has_no_query_gradient() {
        let c = tiny(Variant::S4dOnly, false, true);
        let mut rng = rng_from_seed(3);
        let p = LayerParams::randomized(&c, &mut rng);
        let x = Mat::random_normal(6, 8, 1.0, &mut rng);
        let g = backward(&p, &x, &Mat::random_normal(6, 8, 1.0, &mut rng), &c).unwrap();
        assert!(g.params.w_q.is_none() && g.params.conv_q.is_none());
        assert!(g.params.infos().iter().all(|t| !t.name.contains("_q")));
    }
}
