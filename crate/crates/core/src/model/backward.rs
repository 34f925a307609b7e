//! Reverse-mode gradients of exposed cross-attention queries with respect to the
//! decoder input rows. The weights and the cross-attention context are constants.

use super::attention::self_attention_backward;
use super::decoder::{CrossContext, DecoderRun, ExposedQueries, LayerTrace};
use super::ops::{gelu_grad, inv_rms, rms_norm_scaled_backward};
use super::weights::DecoderLayerWeights;
use super::Model;
use crate::error::{IntraError, Result};
use crate::tensor::{axpy, dot, Matrix};

/// A recorded forward pass that exposed queries, ready for [`Model::queries_backward`].
pub struct QueryTape {
    positions: Vec<usize>,
    run: DecoderRun,
}

impl QueryTape {
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }
}

impl Model {
    /// Expose lifted queries at `positions` and keep the activations needed to
    /// differentiate them.
    pub fn expose_queries_recorded(
        &self,
        input: &Matrix,
        ctx: &CrossContext,
        positions: &[usize],
    ) -> Result<(ExposedQueries, QueryTape)> {
        let mut run = self.run_decoder(input, ctx, Some(positions), true)?;
        let q = run.exposed.take().expect("exposure requested");
        if !q.is_finite() {
            return Err(IntraError::NonFinite("exposed queries".into()));
        }
        Ok((
            q,
            QueryTape {
                positions: positions.to_vec(),
                run,
            },
        ))
    }

    /// Gradient with respect to every decoder input row, given the gradient of a
    /// scalar objective with respect to the exposed queries.
    pub fn queries_backward(
        &self,
        tape: &QueryTape,
        ctx: &CrossContext,
        g_queries: &ExposedQueries,
    ) -> Result<Matrix> {
        let cfg = &self.config;
        if g_queries.shape() != [cfg.dec_layers, cfg.n_h, tape.positions.len(), cfg.d] {
            return Err(IntraError::Shape(format!(
                "query gradient shape {:?} does not match the exposed queries",
                g_queries.shape()
            )));
        }
        let rows = tape.run.traces[0].h_in.rows();
        let mut g_h = Matrix::zeros(rows, cfg.d);
        for l in (0..cfg.dec_layers).rev() {
            let trace = &tape.run.traces[l];
            let layer = &self.weights.decoder[l];
            let mut g_lifted = Matrix::zeros(rows, cfg.n_h * cfg.d);
            for (pi, &row) in tape.positions.iter().enumerate() {
                for h in 0..cfg.n_h {
                    let dst = &mut g_lifted.row_mut(row)[h * cfg.d..(h + 1) * cfg.d];
                    for (a, b) in dst.iter_mut().zip(g_queries.get(l, h, pi)) {
                        *a += b;
                    }
                }
            }
            g_h = self.layer_backward(l, layer, trace, ctx, g_h, g_lifted);
            if !g_h.is_finite() {
                return Err(IntraError::NonFiniteGradient(format!("decoder layer {l}")));
            }
        }
        Ok(g_h)
    }

    fn layer_backward(
        &self,
        l: usize,
        layer: &DecoderLayerWeights,
        t: &LayerTrace,
        ctx: &CrossContext,
        g_out: Matrix,
        mut g_lifted: Matrix,
    ) -> Matrix {
        let cfg = &self.config;
        let eps = cfg.rmsnorm_eps;
        let rows = g_out.rows();

        // feed-forward: h_out = h_b + W2 gelu(W1 norm(h_b))
        let g_act = g_out.matmul_t(&layer.ffn.w2);
        let mut g_pre = g_act;
        for (g, &p) in g_pre.as_mut_slice().iter_mut().zip(t.ffn_pre.as_slice()) {
            *g *= gelu_grad(p);
        }
        let g_xf = g_pre.matmul_t(&layer.ffn.w1);
        let mut g_hb = g_out;
        norm_backward_into(&t.h_b, &layer.ffn_norm, eps, &g_xf, &mut g_hb);

        // cross-attention: h_b = h_a + W_O attn(lift(RoPE(W_Q norm(h_a))))
        if let Some(probs) = &t.ca_probs {
            let g_heads = g_hb.matmul_t(&layer.cross.wo);
            let values = &ctx.values[l];
            let scale = cfg.attn_scale();
            for i in 0..rows {
                for h in 0..cfg.n_h {
                    let g = cfg.group_of(h);
                    let p = &probs.probs[h * rows + i];
                    let go = &g_heads.row(i)[h * cfg.d_h..(h + 1) * cfg.d_h];
                    let gp: Vec<f64> = (0..p.len())
                        .map(|j| dot(go, &values.row(j)[g * cfg.d_h..(g + 1) * cfg.d_h]))
                        .collect();
                    let mean: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
                    let dst = &mut g_lifted.row_mut(i)[h * cfg.d..(h + 1) * cfg.d];
                    for j in 0..p.len() {
                        let gs = p[j] * (gp[j] - mean) * scale;
                        if gs != 0.0 {
                            axpy(gs, ctx.kbar.row(j), dst);
                        }
                    }
                }
            }
        }
        // lift: q̃_i = Σ_c W_ic γ_c q_c, so g_q_c = γ_c Σ_i W_ic g_q̃_i
        let mut g_q = Matrix::zeros(rows, cfg.q_dim());
        for i in 0..rows {
            let gl = g_lifted.row(i);
            if gl.iter().all(|&v| v == 0.0) {
                continue;
            }
            let out = g_q.row_mut(i);
            for h in 0..cfg.n_h {
                let w = layer.cross.wk_blocks[cfg.group_of(h)].as_slice();
                let gq = &mut out[h * cfg.d_h..(h + 1) * cfg.d_h];
                for (r, &gv) in gl[h * cfg.d..(h + 1) * cfg.d].iter().enumerate() {
                    if gv != 0.0 {
                        axpy(gv, &w[r * cfg.d_h..(r + 1) * cfg.d_h], gq);
                    }
                }
                for (c, v) in gq.iter_mut().enumerate() {
                    *v *= layer.cross.gamma_k[c];
                }
            }
            self.rope.apply_inverse(out, i);
        }
        let g_xc = g_q.matmul_t(&layer.cross.wq);
        let mut g_ha = g_hb;
        norm_backward_into(&t.h_a, &layer.cross_norm, eps, &g_xc, &mut g_ha);

        // causal self-attention: h_a = h_in + W_O attn(RoPE(q), RoPE(k), v)
        let g_ctx = g_ha.matmul_t(&layer.self_attn.wo);
        let (mut gq, mut gk, gv) = self_attention_backward(
            &t.q_sa,
            &t.k_sa,
            &t.v_sa,
            &self.head_layout(),
            &t.sa_probs,
            &g_ctx,
        );
        for i in 0..rows {
            self.rope.apply_inverse(gq.row_mut(i), i);
            self.rope.apply_inverse(gk.row_mut(i), i);
        }
        let mut g_xs = gq.matmul_t(&layer.self_attn.wq);
        g_xs.add_assign(&gk.matmul_t(&layer.self_attn.wk));
        g_xs.add_assign(&gv.matmul_t(&layer.self_attn.wv));
        let mut g_in = g_ha;
        norm_backward_into(&t.h_in, &layer.self_norm, eps, &g_xs, &mut g_in);
        debug_assert_eq!(t.xs.rows(), rows);
        debug_assert_eq!(t.xc.rows(), rows);
        debug_assert_eq!(t.xf.rows(), rows);
        debug_assert_eq!(t.q_ca.rows(), rows);
        debug_assert_eq!(t.q_tilde.rows(), rows);
        g_in
    }
}

fn norm_backward_into(x: &Matrix, weight: &[f64], eps: f64, gy: &Matrix, gx: &mut Matrix) {
    for i in 0..x.rows() {
        let xi = x.row(i);
        rms_norm_scaled_backward(xi, weight, inv_rms(xi, eps), gy.row(i), gx.row_mut(i));
    }
}
