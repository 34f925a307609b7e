use super::attention::{self_attention, Mask};
use super::ops::{gelu, rms_norm, rms_norm_scaled_into};
use super::weights::{EncoderLayerWeights, FeedForwardWeights};
use super::Model;
use crate::error::{IntraError, Result};
use crate::tensor::Matrix;

/// Final encoder hidden states, one row per input token.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub states: Matrix,
}

impl EncoderOutput {
    /// Scale-free RMS-normalized rows, the shared cross-attention pool representation.
    pub fn normalized(&self, eps: f64) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.states.rows(), self.states.cols());
        for i in 0..self.states.rows() {
            out.row_mut(i)
                .copy_from_slice(&rms_norm(self.states.row(i), eps)?);
        }
        Ok(out)
    }
}

impl Model {
    /// Encode one token sequence.
    pub fn encode(&self, tokens: &[u32]) -> Result<EncoderOutput> {
        if tokens.is_empty() {
            return Err(IntraError::EmptyInput("encoder input".into()));
        }
        let states = self.encode_segments(&[tokens])?;
        Ok(EncoderOutput { states })
    }

    /// Encode several sequences in one dense pass.
    ///
    /// The sequences are concatenated and run through full-width attention with
    /// cross-segment pairs masked out, so each segment's output equals encoding it
    /// alone while the attention cost grows with the square of the total length.
    pub fn encode_segments(&self, segments: &[&[u32]]) -> Result<Matrix> {
        let cfg = &self.config;
        let total: usize = segments.iter().map(|s| s.len()).sum();
        if total == 0 {
            return Err(IntraError::EmptyInput("encoder input".into()));
        }
        let mut tokens = Vec::with_capacity(total);
        let mut positions = Vec::with_capacity(total);
        let mut seg_ids = Vec::with_capacity(total);
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(IntraError::EmptyInput(format!("encoder segment {s}")));
            }
            if seg.len() > cfg.max_positions {
                return Err(IntraError::TooLong {
                    len: seg.len(),
                    max: cfg.max_positions,
                });
            }
            tokens.extend_from_slice(seg);
            positions.extend(0..seg.len());
            seg_ids.extend(std::iter::repeat_n(s as u32, seg.len()));
        }
        let mut h = self.embed_tokens(&tokens)?;
        for layer in &self.weights.encoder {
            self.encoder_layer(layer, &mut h, &positions, &seg_ids);
        }
        let mut out = Matrix::zeros(h.rows(), h.cols());
        for i in 0..h.rows() {
            rms_norm_scaled_into(
                h.row(i),
                &self.weights.enc_final_norm,
                cfg.rmsnorm_eps,
                out.row_mut(i),
            );
        }
        if !out.is_finite() {
            return Err(IntraError::NonFinite("encoder output".into()));
        }
        Ok(out)
    }

    fn encoder_layer(
        &self,
        layer: &EncoderLayerWeights,
        h: &mut Matrix,
        positions: &[usize],
        seg_ids: &[u32],
    ) {
        let eps = self.config.rmsnorm_eps;
        let x = norm_rows(h, &layer.attn_norm, eps);
        let mut q = x.matmul(&layer.attn.wq);
        let mut k = x.matmul(&layer.attn.wk);
        let v = x.matmul(&layer.attn.wv);
        for (i, &p) in positions.iter().enumerate() {
            self.rope.apply(q.row_mut(i), p);
            self.rope.apply(k.row_mut(i), p);
        }
        let (ctx, _) = self_attention(
            &q,
            &k,
            &v,
            &self.head_layout(),
            Mask::Segments {
                query: seg_ids,
                key: seg_ids,
            },
            false,
        );
        h.add_assign(&ctx.matmul(&layer.attn.wo));
        let x = norm_rows(h, &layer.ffn_norm, eps);
        h.add_assign(&feed_forward(&layer.ffn, &x));
    }
}

pub(crate) fn norm_rows(h: &Matrix, weight: &[f64], eps: f64) -> Matrix {
    let mut x = Matrix::zeros(h.rows(), h.cols());
    for i in 0..h.rows() {
        rms_norm_scaled_into(h.row(i), weight, eps, x.row_mut(i));
    }
    x
}

pub(crate) fn feed_forward(ffn: &FeedForwardWeights, x: &Matrix) -> Matrix {
    let mut a = x.matmul(&ffn.w1);
    a.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    a.matmul(&ffn.w2)
}
