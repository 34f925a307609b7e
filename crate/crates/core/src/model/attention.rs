//! Grouped-query attention kernels.
//!
//! Rows are head-major: a query row holds `n_h` slices of `d_h`, key and value
//! rows hold `n_kv` slices. Query head `h` reads KV head `h / n_rep`.

use crate::tensor::{axpy, dot, Matrix};

/// Which keys each query row may attend to.
#[derive(Debug, Clone, Copy)]
pub enum Mask<'a> {
    /// Query row `i` sits at absolute index `offset + i` and sees keys `0..=offset + i`.
    Causal { offset: usize },
    /// Dense scores over all keys; pairs in different segments are masked to `-inf`.
    Segments { query: &'a [u32], key: &'a [u32] },
}

/// Softmax weights kept for the backward pass, one row per `(head, query)`.
#[derive(Debug, Clone, Default)]
pub struct AttnProbs {
    pub n_h: usize,
    pub rows: usize,
    /// `probs[h * rows + i]` covers the keys visible to query `i`.
    pub probs: Vec<Vec<f64>>,
}

pub struct HeadLayout {
    pub n_h: usize,
    pub n_kv: usize,
    pub d_h: usize,
    pub scale: f64,
}

impl HeadLayout {
    #[inline]
    fn group(&self, h: usize) -> usize {
        h / (self.n_h / self.n_kv)
    }
}

/// `softmax(q kᵀ · scale + mask) v` for every query head.
pub fn self_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    layout: &HeadLayout,
    mask: Mask<'_>,
    keep_probs: bool,
) -> (Matrix, Option<AttnProbs>) {
    let (n_h, d_h) = (layout.n_h, layout.d_h);
    let lq = q.rows();
    let lk = k.rows();
    let mut ctx = Matrix::zeros(lq, n_h * d_h);
    let mut kept = keep_probs.then(|| AttnProbs {
        n_h,
        rows: lq,
        probs: vec![Vec::new(); n_h * lq],
    });
    let mut scores = vec![0.0; lk];
    for i in 0..lq {
        let visible = match mask {
            Mask::Causal { offset } => (offset + i + 1).min(lk),
            Mask::Segments { .. } => lk,
        };
        let qrow = q.row(i);
        for h in 0..n_h {
            let g = layout.group(h);
            let qh = &qrow[h * d_h..(h + 1) * d_h];
            let s = &mut scores[..visible];
            match mask {
                Mask::Causal { .. } => {
                    for (j, sj) in s.iter_mut().enumerate() {
                        *sj = dot(qh, &k.row(j)[g * d_h..(g + 1) * d_h]) * layout.scale;
                    }
                }
                Mask::Segments { query, key } => {
                    let seg = query[i];
                    for (j, sj) in s.iter_mut().enumerate() {
                        let bias = if key[j] == seg {
                            0.0
                        } else {
                            f64::NEG_INFINITY
                        };
                        *sj = dot(qh, &k.row(j)[g * d_h..(g + 1) * d_h]) * layout.scale + bias;
                    }
                }
            }
            super::ops::softmax_in_place(s);
            let out = &mut ctx.row_mut(i)[h * d_h..(h + 1) * d_h];
            for (j, &p) in s.iter().enumerate() {
                axpy(p, &v.row(j)[g * d_h..(g + 1) * d_h], out);
            }
            if let Some(kp) = kept.as_mut() {
                kp.probs[h * lq + i] = s.to_vec();
            }
        }
    }
    (ctx, kept)
}

/// Backward of [`self_attention`] given the upstream gradient of the head outputs.
///
/// Returns gradients for `q`, `k` and `v` (in their rotated/projected form).
pub fn self_attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    layout: &HeadLayout,
    probs: &AttnProbs,
    g_ctx: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let (n_h, d_h) = (layout.n_h, layout.d_h);
    let lq = q.rows();
    let mut gq = Matrix::zeros(q.rows(), q.cols());
    let mut gk = Matrix::zeros(k.rows(), k.cols());
    let mut gv = Matrix::zeros(v.rows(), v.cols());
    for i in 0..lq {
        for h in 0..n_h {
            let g = layout.group(h);
            let p = &probs.probs[h * lq + i];
            let go = &g_ctx.row(i)[h * d_h..(h + 1) * d_h];
            // dL/dp_j = go · v_j, then softmax Jacobian
            let gp: Vec<f64> = (0..p.len())
                .map(|j| dot(go, &v.row(j)[g * d_h..(g + 1) * d_h]))
                .collect();
            let mean: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
            let qh: Vec<f64> = q.row(i)[h * d_h..(h + 1) * d_h].to_vec();
            for j in 0..p.len() {
                if p[j] == 0.0 {
                    continue;
                }
                axpy(p[j], go, &mut gv.row_mut(j)[g * d_h..(g + 1) * d_h]);
                let gs = p[j] * (gp[j] - mean) * layout.scale;
                let kj = &k.row(j)[g * d_h..(g + 1) * d_h];
                axpy(gs, kj, &mut gq.row_mut(i)[h * d_h..(h + 1) * d_h]);
                axpy(gs, &qh, &mut gk.row_mut(j)[g * d_h..(g + 1) * d_h]);
            }
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn segment_mask_matches_separate_blocks_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layout = HeadLayout {
            n_h: 4,
            n_kv: 2,
            d_h: 4,
            scale: 0.5,
        };
        let q = rand_matrix(&mut rng, 7, 16);
        let k = rand_matrix(&mut rng, 7, 8);
        let v = rand_matrix(&mut rng, 7, 8);
        let seg = [0, 0, 0, 1, 1, 1, 1];
        let (joint, _) = self_attention(
            &q,
            &k,
            &v,
            &layout,
            Mask::Segments {
                query: &seg,
                key: &seg,
            },
            false,
        );
        for (lo, hi) in [(0usize, 3usize), (3, 7)] {
            let idx: Vec<usize> = (lo..hi).collect();
            let s = vec![0u32; idx.len()];
            let (part, _) = self_attention(
                &q.select_rows(&idx),
                &k.select_rows(&idx),
                &v.select_rows(&idx),
                &layout,
                Mask::Segments { query: &s, key: &s },
                false,
            );
            for (a, i) in idx.iter().enumerate() {
                assert_eq!(part.row(a), joint.row(*i));
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layout = HeadLayout {
            n_h: 2,
            n_kv: 1,
            d_h: 2,
            scale: 0.7,
        };
        let q = rand_matrix(&mut rng, 3, 4);
        let k = rand_matrix(&mut rng, 3, 2);
        let v = rand_matrix(&mut rng, 3, 2);
        let g_ctx = rand_matrix(&mut rng, 3, 4);
        let loss = |q: &Matrix, k: &Matrix, v: &Matrix| {
            let (c, _) = self_attention(q, k, v, &layout, Mask::Causal { offset: 0 }, false);
            c.as_slice()
                .iter()
                .zip(g_ctx.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let (_, probs) = self_attention(&q, &k, &v, &layout, Mask::Causal { offset: 0 }, true);
        let (gq, gk, gv) = self_attention_backward(&q, &k, &v, &layout, &probs.unwrap(), &g_ctx);
        let h = 1e-6;
        for (which, grad) in [(0, &gq), (1, &gk), (2, &gv)] {
            let base = [&q, &k, &v][which];
            for idx in 0..base.as_slice().len() {
                let mut plus = [q.clone(), k.clone(), v.clone()];
                let mut minus = [q.clone(), k.clone(), v.clone()];
                plus[which].as_mut_slice()[idx] += h;
                minus[which].as_mut_slice()[idx] -= h;
                let fd = (loss(&plus[0], &plus[1], &plus[2])
                    - loss(&minus[0], &minus[1], &minus[2]))
                    / (2.0 * h);
                let an = grad.as_slice()[idx];
                assert!(
                    (fd - an).abs() < 1e-7,
                    "tensor {which} idx {idx}: fd {fd} vs {an}"
                );
            }
        }
    }
}
