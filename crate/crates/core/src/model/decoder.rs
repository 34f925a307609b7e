//! Decoder forward passes: full-sequence runs with query exposure, and
//! incremental decode sessions with a self-attention KV cache.

use super::attention::{self_attention, AttnProbs, Mask};
use super::encoder::norm_rows;
use super::ops::{gelu, rms_norm_scaled_into, softmax_in_place};
use super::rqwk::{reverse_qwk_into, standard_keys};
use super::weights::DecoderLayerWeights;
use super::{Model, SEP_TOKEN};
use crate::error::{IntraError, Result};
use crate::tensor::{axpy, dot, Matrix};

/// Which algebraic route the cross-attention logits take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossAttnPath {
    /// Lift each query with `γ_K` and `W_K^(g)ᵀ`, then dot with `k̄`.
    Reverse,
    /// Materialize per-group keys `(k̄ W_K^(g)) ⊙ γ_K`; kept for equivalence checks.
    Standard,
}

/// Cross-attention memory: normalized context rows and the per-layer values
/// `V_ℓ = k̄ W_V,ℓ` computed on demand for them.
#[derive(Debug, Clone)]
pub struct CrossContext {
    pub(crate) kbar: Matrix,
    pub(crate) values: Vec<Matrix>,
}

impl CrossContext {
    pub fn kbar(&self) -> &Matrix {
        &self.kbar
    }

    pub fn len(&self) -> usize {
        self.kbar.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.kbar.rows() == 0
    }
}

/// Lifted cross-attention queries at designated input positions,
/// indexed `[layer][head][position]`, each a vector in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposedQueries {
    pub layers: usize,
    pub heads: usize,
    pub positions: usize,
    pub d: usize,
    data: Vec<f64>,
}

impl ExposedQueries {
    pub fn zeros(layers: usize, heads: usize, positions: usize, d: usize) -> Self {
        Self {
            layers,
            heads,
            positions,
            d,
            data: vec![0.0; layers * heads * positions * d],
        }
    }

    #[inline]
    fn offset(&self, l: usize, h: usize, p: usize) -> usize {
        ((l * self.heads + h) * self.positions + p) * self.d
    }

    #[inline]
    pub fn get(&self, l: usize, h: usize, p: usize) -> &[f64] {
        let o = self.offset(l, h, p);
        &self.data[o..o + self.d]
    }

    #[inline]
    pub fn get_mut(&mut self, l: usize, h: usize, p: usize) -> &mut [f64] {
        let o = self.offset(l, h, p);
        &mut self.data[o..o + self.d]
    }

    /// All positions of one `(layer, head)` as a contiguous `positions × d` block.
    #[inline]
    pub fn block(&self, l: usize, h: usize) -> &[f64] {
        let o = self.offset(l, h, 0);
        &self.data[o..o + self.positions * self.d]
    }

    #[inline]
    pub fn block_mut(&mut self, l: usize, h: usize) -> &mut [f64] {
        let o = self.offset(l, h, 0);
        let n = self.positions * self.d;
        &mut self.data[o..o + n]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.layers, self.heads, self.positions, self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    /// Collect lifted queries at these input rows for every layer.
    ExposeQueries(&'a [usize]),
    /// Next-token logits at every row.
    Logits,
}

#[derive(Debug, Clone)]
pub enum DecoderOutput {
    Queries(ExposedQueries),
    Logits(Matrix),
}

/// Self-attention KV cache of one decoder layer (keys already rotated).
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    k: Matrix,
    v: Matrix,
}

/// Activations of one decoder layer kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    pub h_in: Matrix,
    pub xs: Matrix,
    pub q_sa: Matrix,
    pub k_sa: Matrix,
    pub v_sa: Matrix,
    pub sa_probs: AttnProbs,
    pub h_a: Matrix,
    pub xc: Matrix,
    pub q_ca: Matrix,
    pub q_tilde: Matrix,
    pub ca_probs: Option<AttnProbs>,
    pub h_b: Matrix,
    pub xf: Matrix,
    pub ffn_pre: Matrix,
}

pub(crate) struct DecoderRun {
    pub hidden: Matrix,
    pub exposed: Option<ExposedQueries>,
    pub traces: Vec<LayerTrace>,
}

impl Model {
    /// Attach per-layer values to a block of normalized context rows.
    pub fn prepare_context(&self, kbar: Matrix) -> Result<CrossContext> {
        if kbar.cols() != self.config.d {
            return Err(IntraError::Shape(format!(
                "context rows have width {}, model width is {}",
                kbar.cols(),
                self.config.d
            )));
        }
        let values = if kbar.is_empty() {
            vec![Matrix::empty(self.config.kv_dim()); self.config.dec_layers]
        } else {
            self.weights
                .decoder
                .iter()
                .map(|layer| kbar.matmul(&layer.cross.wv))
                .collect()
        };
        Ok(CrossContext { kbar, values })
    }

    pub fn empty_context(&self) -> CrossContext {
        CrossContext {
            kbar: Matrix::empty(self.config.d),
            values: vec![Matrix::empty(self.config.kv_dim()); self.config.dec_layers],
        }
    }

    /// Rotate the cross-attention queries of `xc` and lift every head into `R^d`.
    ///
    /// Returns `(rotated queries L × n_h·d_h, lifted queries L × n_h·d)`.
    pub(crate) fn lift_queries(
        &self,
        layer: &DecoderLayerWeights,
        xc: &Matrix,
        positions: &[usize],
    ) -> (Matrix, Matrix) {
        let cfg = &self.config;
        let mut q = xc.matmul(&layer.cross.wq);
        let mut lifted = Matrix::zeros(xc.rows(), cfg.n_h * cfg.d);
        for (i, &p) in positions.iter().enumerate() {
            self.rope.apply(q.row_mut(i), p);
            let qrow = q.row(i);
            let out = lifted.row_mut(i);
            for h in 0..cfg.n_h {
                let g = cfg.group_of(h);
                reverse_qwk_into(
                    &qrow[h * cfg.d_h..(h + 1) * cfg.d_h],
                    &layer.cross.gamma_k,
                    layer.cross.wk_blocks[g].as_slice(),
                    &mut out[h * cfg.d..(h + 1) * cfg.d],
                );
            }
        }
        (q, lifted)
    }

    /// Cross-attention head outputs (`L × n_h·d_h`, before `W_O`) for lifted queries.
    fn cross_heads_reverse(
        &self,
        lifted: &Matrix,
        ctx: &CrossContext,
        l: usize,
        keep: bool,
    ) -> (Matrix, Option<AttnProbs>) {
        let cfg = &self.config;
        let (n_h, d, d_h) = (cfg.n_h, cfg.d, cfg.d_h);
        let scale = cfg.attn_scale();
        let n = ctx.len();
        let values = &ctx.values[l];
        let rows = lifted.rows();
        let mut out = Matrix::zeros(rows, n_h * d_h);
        let mut kept = keep.then(|| AttnProbs {
            n_h,
            rows,
            probs: vec![Vec::new(); n_h * rows],
        });
        let mut s = vec![0.0; n];
        for i in 0..rows {
            for h in 0..n_h {
                let g = cfg.group_of(h);
                let qt = &lifted.row(i)[h * d..(h + 1) * d];
                for (j, sj) in s.iter_mut().enumerate() {
                    *sj = dot(qt, ctx.kbar.row(j)) * scale;
                }
                softmax_in_place(&mut s);
                let o = &mut out.row_mut(i)[h * d_h..(h + 1) * d_h];
                for (j, &p) in s.iter().enumerate() {
                    axpy(p, &values.row(j)[g * d_h..(g + 1) * d_h], o);
                }
                if let Some(k) = kept.as_mut() {
                    k.probs[h * rows + i] = s.clone();
                }
            }
        }
        (out, kept)
    }

    fn cross_heads_standard(&self, q: &Matrix, ctx: &CrossContext, l: usize) -> Result<Matrix> {
        let cfg = &self.config;
        let layer = &self.weights.decoder[l];
        let (n_h, d_h) = (cfg.n_h, cfg.d_h);
        let n = ctx.len();
        let blocks: Vec<&[f64]> = layer.cross.wk_blocks.iter().map(|b| b.as_slice()).collect();
        let keys = standard_keys(ctx.kbar.as_slice(), &layer.cross.gamma_k, &blocks, cfg.d)?;
        let values = &ctx.values[l];
        let mut out = Matrix::zeros(q.rows(), n_h * d_h);
        let mut s = vec![0.0; n];
        for i in 0..q.rows() {
            for h in 0..n_h {
                let g = cfg.group_of(h);
                let qh = &q.row(i)[h * d_h..(h + 1) * d_h];
                for (j, sj) in s.iter_mut().enumerate() {
                    *sj =
                        dot(qh, &keys[(g * n + j) * d_h..(g * n + j + 1) * d_h]) * cfg.attn_scale();
                }
                softmax_in_place(&mut s);
                let o = &mut out.row_mut(i)[h * d_h..(h + 1) * d_h];
                for (j, &p) in s.iter().enumerate() {
                    axpy(p, &values.row(j)[g * d_h..(g + 1) * d_h], o);
                }
            }
        }
        Ok(out)
    }

    /// Cross-attention sub-block of decoder layer `l` applied to residual rows `hidden`.
    ///
    /// Returns `hidden + W_O · attention(...)`; with an empty context the sub-block is
    /// the identity and `hidden` comes back unchanged.
    pub fn cross_attention_block(
        &self,
        l: usize,
        hidden: &Matrix,
        positions: &[usize],
        ctx: &CrossContext,
        path: CrossAttnPath,
    ) -> Result<Matrix> {
        let layer = self.weights.decoder.get(l).ok_or_else(|| {
            IntraError::InvalidArgument(format!("decoder layer {l} does not exist"))
        })?;
        if positions.len() != hidden.rows() {
            return Err(IntraError::Shape(format!(
                "{} positions for {} hidden rows",
                positions.len(),
                hidden.rows()
            )));
        }
        self.check_positions(positions)?;
        if ctx.is_empty() {
            return Ok(hidden.clone());
        }
        let xc = norm_rows(hidden, &layer.cross_norm, self.config.rmsnorm_eps);
        let (q, lifted) = self.lift_queries(layer, &xc, positions);
        let heads = match path {
            CrossAttnPath::Reverse => self.cross_heads_reverse(&lifted, ctx, l, false).0,
            CrossAttnPath::Standard => self.cross_heads_standard(&q, ctx, l)?,
        };
        let mut out = hidden.clone();
        out.add_assign(&heads.matmul(&layer.cross.wo));
        if !out.is_finite() {
            return Err(IntraError::NonFinite(format!(
                "cross-attention of decoder layer {l}"
            )));
        }
        Ok(out)
    }

    fn check_positions(&self, positions: &[usize]) -> Result<()> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_positions) {
            return Err(IntraError::TooLong {
                len: p + 1,
                max: self.config.max_positions,
            });
        }
        Ok(())
    }

    fn new_caches(&self) -> Vec<LayerCache> {
        (0..self.config.dec_layers)
            .map(|_| LayerCache {
                k: Matrix::empty(self.config.kv_dim()),
                v: Matrix::empty(self.config.kv_dim()),
            })
            .collect()
    }

    /// Run a block of new decoder rows through every layer.
    ///
    /// `expose` lists row indices (relative to the block) whose lifted queries are
    /// collected; `record` keeps activations for [`Model::decoder_backward`].
    pub(crate) fn run_block(
        &self,
        mut h: Matrix,
        start: usize,
        caches: &mut [LayerCache],
        ctx: &CrossContext,
        expose: Option<&[usize]>,
        record: bool,
    ) -> Result<DecoderRun> {
        let cfg = &self.config;
        let rows = h.rows();
        if h.cols() != cfg.d {
            return Err(IntraError::Shape(format!(
                "decoder input width {} != {}",
                h.cols(),
                cfg.d
            )));
        }
        if start + rows > cfg.max_positions {
            return Err(IntraError::TooLong {
                len: start + rows,
                max: cfg.max_positions,
            });
        }
        if let Some(ex) = expose {
            if let Some(&p) = ex.iter().find(|&&p| p >= rows) {
                return Err(IntraError::PositionOutOfRange {
                    position: p,
                    len: rows,
                });
            }
        }
        if !h.is_finite() {
            return Err(IntraError::NonFinite("decoder input".into()));
        }
        let positions: Vec<usize> = (start..start + rows).collect();
        let eps = cfg.rmsnorm_eps;
        let layout = self.head_layout();
        let mut exposed =
            expose.map(|ex| ExposedQueries::zeros(cfg.dec_layers, cfg.n_h, ex.len(), cfg.d));
        let mut traces = Vec::new();

        for (l, layer) in self.weights.decoder.iter().enumerate() {
            let h_in = record.then(|| h.clone());
            // causal self-attention
            let xs = norm_rows(&h, &layer.self_norm, eps);
            let mut q = xs.matmul(&layer.self_attn.wq);
            let mut k = xs.matmul(&layer.self_attn.wk);
            let v = xs.matmul(&layer.self_attn.wv);
            for (i, &p) in positions.iter().enumerate() {
                self.rope.apply(q.row_mut(i), p);
                self.rope.apply(k.row_mut(i), p);
            }
            let cache = &mut caches[l];
            cache.k.append(&k);
            cache.v.append(&v);
            let (sa_ctx, sa_probs) = self_attention(
                &q,
                &cache.k,
                &cache.v,
                &layout,
                Mask::Causal { offset: start },
                record,
            );
            h.add_assign(&sa_ctx.matmul(&layer.self_attn.wo));
            let h_a = record.then(|| h.clone());

            // cross-attention in reverse query-key form
            let xc = norm_rows(&h, &layer.cross_norm, eps);
            let (q_ca, lifted) = self.lift_queries(layer, &xc, &positions);
            if let (Some(ex), Some(rows_to_expose)) = (exposed.as_mut(), expose) {
                for (pi, &row) in rows_to_expose.iter().enumerate() {
                    for head in 0..cfg.n_h {
                        ex.get_mut(l, head, pi)
                            .copy_from_slice(&lifted.row(row)[head * cfg.d..(head + 1) * cfg.d]);
                    }
                }
            }
            let mut ca_probs = None;
            if !ctx.is_empty() {
                let (heads, probs) = self.cross_heads_reverse(&lifted, ctx, l, record);
                ca_probs = probs;
                h.add_assign(&heads.matmul(&layer.cross.wo));
            }
            let h_b = record.then(|| h.clone());

            // feed-forward
            let xf = norm_rows(&h, &layer.ffn_norm, eps);
            let pre = xf.matmul(&layer.ffn.w1);
            let mut act = pre.clone();
            act.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
            h.add_assign(&act.matmul(&layer.ffn.w2));

            if !h.is_finite() {
                return Err(IntraError::NonFinite(format!("decoder layer {l}")));
            }
            if record {
                traces.push(LayerTrace {
                    h_in: h_in.expect("recorded"),
                    xs,
                    q_sa: q,
                    k_sa: k,
                    v_sa: v,
                    sa_probs: sa_probs.expect("recorded"),
                    h_a: h_a.expect("recorded"),
                    xc,
                    q_ca,
                    q_tilde: lifted,
                    ca_probs,
                    h_b: h_b.expect("recorded"),
                    xf,
                    ffn_pre: pre,
                });
            }
        }
        Ok(DecoderRun {
            hidden: h,
            exposed,
            traces,
        })
    }

    pub(crate) fn run_decoder(
        &self,
        input: &Matrix,
        ctx: &CrossContext,
        expose: Option<&[usize]>,
        record: bool,
    ) -> Result<DecoderRun> {
        if input.is_empty() {
            return Err(IntraError::EmptyInput("decoder input".into()));
        }
        let mut caches = self.new_caches();
        self.run_block(input.clone(), 0, &mut caches, ctx, expose, record)
    }

    /// One decoder forward pass over `input` (rows may mix token-table rows and
    /// free embeddings) with cross-attention over `ctx`.
    pub fn decoder_forward(
        &self,
        input: &Matrix,
        ctx: &CrossContext,
        mode: ForwardMode<'_>,
    ) -> Result<DecoderOutput> {
        match mode {
            ForwardMode::ExposeQueries(positions) => {
                let run = self.run_decoder(input, ctx, Some(positions), false)?;
                let q = run.exposed.expect("exposure requested");
                if !q.is_finite() {
                    return Err(IntraError::NonFinite("exposed queries".into()));
                }
                Ok(DecoderOutput::Queries(q))
            }
            ForwardMode::Logits => {
                let run = self.run_decoder(input, ctx, None, false)?;
                Ok(DecoderOutput::Logits(self.output_logits(&run.hidden)))
            }
        }
    }

    /// Final hidden states (before the output norm) of a decoder pass.
    pub fn decoder_hidden(&self, input: &Matrix, ctx: &CrossContext) -> Result<Matrix> {
        Ok(self.run_decoder(input, ctx, None, false)?.hidden)
    }

    /// Decoder pass with every cross-attention sub-block removed.
    pub fn decoder_hidden_without_cross_attention(&self, input: &Matrix) -> Result<Matrix> {
        let mut stripped = self.clone();
        for layer in &mut stripped.weights.decoder {
            layer.cross.wo = Matrix::zeros(layer.cross.wo.rows(), layer.cross.wo.cols());
        }
        stripped.decoder_hidden(input, &stripped.empty_context())
    }

    fn output_logits(&self, hidden: &Matrix) -> Matrix {
        let x = norm_rows(
            hidden,
            &self.weights.dec_final_norm,
            self.config.rmsnorm_eps,
        );
        x.matmul(&self.weights.lm_head)
    }

    fn row_logits(&self, row: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; row.len()];
        rms_norm_scaled_into(
            row,
            &self.weights.dec_final_norm,
            self.config.rmsnorm_eps,
            &mut x,
        );
        let lm = &self.weights.lm_head;
        let mut out = vec![0.0; lm.cols()];
        for (k, &xk) in x.iter().enumerate() {
            axpy(xk, lm.row(k), &mut out);
        }
        out
    }

    /// Start an incremental decode over a prepared context.
    pub fn session<'a>(&'a self, ctx: &'a CrossContext) -> DecodeSession<'a> {
        DecodeSession {
            model: self,
            ctx,
            caches: self.new_caches(),
            len: 0,
        }
    }

    /// Greedy decoding from `question_tokens` followed by a separator.
    ///
    /// Stops at the end-of-sequence token (not emitted) or after `max_len` tokens.
    /// Ties in the argmax go to the lowest token id.
    pub fn greedy_decode(
        &self,
        question_tokens: &[u32],
        ctx: &CrossContext,
        max_len: usize,
    ) -> Result<Vec<u32>> {
        if max_len == 0 {
            return Err(IntraError::InvalidArgument(
                "max_len must be at least 1".into(),
            ));
        }
        let mut prompt = question_tokens.to_vec();
        prompt.push(SEP_TOKEN);
        let mut session = self.session(ctx);
        let mut logits = session.prefill(&prompt)?;
        let mut out = Vec::new();
        loop {
            let next = argmax_lowest(&logits);
            if next == super::EOS_TOKEN || out.len() == max_len {
                break;
            }
            out.push(next);
            if out.len() == max_len {
                break;
            }
            logits = session.step(next)?;
        }
        Ok(out)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

/// Incremental decoder state over one prepared context.
pub struct DecodeSession<'a> {
    model: &'a Model,
    ctx: &'a CrossContext,
    caches: Vec<LayerCache>,
    len: usize,
}

impl DecodeSession<'_> {
    /// Feed `tokens` and return next-token logits after the last of them.
    pub fn prefill(&mut self, tokens: &[u32]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(IntraError::EmptyInput("prefill tokens".into()));
        }
        let emb = self.model.embed_tokens(tokens)?;
        let run = self
            .model
            .run_block(emb, self.len, &mut self.caches, self.ctx, None, false)?;
        self.len += tokens.len();
        Ok(self.model.row_logits(run.hidden.row(run.hidden.rows() - 1)))
    }

    pub fn step(&mut self, token: u32) -> Result<Vec<f64>> {
        self.prefill(&[token])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::model::{WeightInit, EOS_TOKEN};

    fn context(model: &Model, tokens: &[u32]) -> CrossContext {
        let k = model
            .encode(tokens)
            .unwrap()
            .normalized(model.config().rmsnorm_eps)
            .unwrap();
        model.prepare_context(k).unwrap()
    }

    #[test]
    fn expose_shape_and_mode_consistency() {
        let model = lively_model(tiny_config(), 11);
        let ctx = context(&model, &[5, 6, 7, 8, 9]);
        let input = model.embed_tokens(&[4, 10, 12, 13]).unwrap();
        let positions = [1, 3];
        let q = match model
            .decoder_forward(&input, &ctx, ForwardMode::ExposeQueries(&positions))
            .unwrap()
        {
            DecoderOutput::Queries(q) => q,
            _ => unreachable!(),
        };
        assert_eq!(q.shape(), [2, 4, 2, 16]);
        let exposed_run = model
            .run_decoder(&input, &ctx, Some(&positions), false)
            .unwrap();
        let plain_run = model.run_decoder(&input, &ctx, None, false).unwrap();
        assert_eq!(exposed_run.hidden, plain_run.hidden);
        let l1 = match model
            .decoder_forward(&input, &ctx, ForwardMode::Logits)
            .unwrap()
        {
            DecoderOutput::Logits(l) => l,
            _ => unreachable!(),
        };
        let _ = model
            .decoder_forward(&input, &ctx, ForwardMode::ExposeQueries(&positions))
            .unwrap();
        let l2 = match model
            .decoder_forward(&input, &ctx, ForwardMode::Logits)
            .unwrap()
        {
            DecoderOutput::Logits(l) => l,
            _ => unreachable!(),
        };
        assert_eq!(l1, l2);
        assert_eq!(l1.rows(), 4);
    }

    #[test]
    fn expose_rejects_out_of_range_position() {
        let model = lively_model(tiny_config(), 11);
        let input = model.embed_tokens(&[4, 10]).unwrap();
        let err = model
            .decoder_forward(
                &input,
                &model.empty_context(),
                ForwardMode::ExposeQueries(&[2]),
            )
            .unwrap_err();
        assert!(matches!(
            err,
            IntraError::PositionOutOfRange {
                position: 2,
                len: 2
            }
        ));
    }

    #[test]
    fn empty_context_is_identity() {
        let model = lively_model(tiny_config(), 12);
        let hidden = model.embed_tokens(&[4, 5, 6]).unwrap();
        let out = model
            .cross_attention_block(
                0,
                &hidden,
                &[0, 1, 2],
                &model.empty_context(),
                CrossAttnPath::Reverse,
            )
            .unwrap();
        assert_eq!(out, hidden);
        let with = model
            .decoder_hidden(&hidden, &model.empty_context())
            .unwrap();
        let without = model
            .decoder_hidden_without_cross_attention(&hidden)
            .unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn singleton_context_gets_full_weight() {
        let model = lively_model(tiny_config(), 13);
        let ctx = context(&model, &[9]);
        let hidden = model.embed_tokens(&[4, 5]).unwrap();
        let out = model
            .cross_attention_block(1, &hidden, &[0, 1], &ctx, CrossAttnPath::Reverse)
            .unwrap();
        // every head returns exactly V of the single context row
        let layer = &model.weights().decoder[1];
        let v = ctx.kbar().matmul(&layer.cross.wv);
        let cfg = model.config();
        let mut heads = Matrix::zeros(2, cfg.q_dim());
        for i in 0..2 {
            for h in 0..cfg.n_h {
                let g = cfg.group_of(h);
                heads.row_mut(i)[h * cfg.d_h..(h + 1) * cfg.d_h]
                    .copy_from_slice(&v.row(0)[g * cfg.d_h..(g + 1) * cfg.d_h]);
            }
        }
        let mut expect = hidden.clone();
        expect.add_assign(&heads.matmul(&layer.cross.wo));
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn reverse_and_standard_paths_agree() {
        let model = lively_model(tiny_config(), 14);
        let ctx = context(&model, &[5, 9, 21, 33, 17, 8]);
        let hidden = model.embed_tokens(&[4, 6, 7]).unwrap();
        for l in 0..2 {
            let a = model
                .cross_attention_block(l, &hidden, &[3, 4, 5], &ctx, CrossAttnPath::Reverse)
                .unwrap();
            let b = model
                .cross_attention_block(l, &hidden, &[3, 4, 5], &ctx, CrossAttnPath::Standard)
                .unwrap();
            let scale = b.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(a.max_abs_diff(&b) <= 1e-12 * scale);
        }
    }

    #[test]
    fn session_matches_full_forward() {
        let model = lively_model(tiny_config(), 15);
        let ctx = context(&model, &[5, 9, 21]);
        let tokens = [4u32, 6, 7, 30, 31];
        let full = match model
            .decoder_forward(
                &model.embed_tokens(&tokens).unwrap(),
                &ctx,
                ForwardMode::Logits,
            )
            .unwrap()
        {
            DecoderOutput::Logits(l) => l,
            _ => unreachable!(),
        };
        let mut s = model.session(&ctx);
        let mut last = s.prefill(&tokens[..2]).unwrap();
        for (i, &t) in tokens[2..].iter().enumerate() {
            let row = full.row(1 + i);
            let diff = row
                .iter()
                .zip(&last)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-10);
            last = s.step(t).unwrap();
        }
        assert_eq!(s.len(), 5);
    }

    #[test]
    fn greedy_decode_is_deterministic_and_bounded() {
        let model = lively_model(tiny_config(), 16);
        let ctx = context(&model, &[5, 9, 21]);
        let a = model.greedy_decode(&[4, 6, 7], &ctx, 6).unwrap();
        let b = model.greedy_decode(&[4, 6, 7], &ctx, 6).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
        assert!(
            model
                .greedy_decode(&[4], &model.empty_context(), 3)
                .unwrap()
                .len()
                <= 3
        );
    }

    #[test]
    fn eos_biased_head_gives_empty_answer() {
        let config = tiny_config();
        let mut weights =
            crate::model::ModelWeights::init(&config, &WeightInit::with_seed(1)).unwrap();
        // residual stream reduces to the token embedding, whose first coordinate is positive
        for layer in &mut weights.decoder {
            layer.self_attn.wo.scale(0.0);
            layer.cross.wo.scale(0.0);
            layer.ffn.w2.scale(0.0);
        }
        for r in 0..weights.embed.rows() {
            let v = weights.embed.get(r, 0).abs() + 1.0;
            weights.embed.set(r, 0, v);
        }
        weights.lm_head.scale(0.0);
        weights.lm_head.set(0, EOS_TOKEN as usize, 1.0);
        let model = Model::new(config, weights).unwrap();
        let out = model
            .greedy_decode(&[4, 5], &model.empty_context(), 5)
            .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn argmax_ties_pick_lowest_id() {
        assert_eq!(argmax_lowest(&[0.0, 1.0, 1.0]), 1);
        assert_eq!(argmax_lowest(&[0.0, 0.0]), 0);
    }
}
