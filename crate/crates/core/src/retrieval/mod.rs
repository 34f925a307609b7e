//! Chunk scoring and selection: the encoder-similarity initial set `S₀`, the
//! decoder-query scores over the whole pool, top-n selection and reranking.

pub mod ivf;
pub mod maxsim;
pub mod params;

pub use ivf::IvfIndex;
pub use maxsim::maxsim;
pub use params::RetrievalParams;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IntraError, Result};
use crate::model::{CrossContext, DecoderOutput, ExposedQueries, ForwardMode, Model};
use crate::store::{ChunkPool, PooledIndex};
use crate::tensor::{dot, Matrix};
use maxsim::maxsim_unchecked;

/// Which scoring pass produced a score vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initial,
    Intra,
}

/// One score per pool chunk, in pool order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub stage: Stage,
    pub values: Vec<f64>,
}

/// Chunk indices ordered by descending score, ties by ascending index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionSet {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl SelectionSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.contains(&index)
    }

    /// The first `k` members.
    pub fn prefix(&self, k: usize) -> SelectionSet {
        let k = k.min(self.len());
        SelectionSet {
            indices: self.indices[..k].to_vec(),
            scores: self.scores[..k].to_vec(),
        }
    }
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> std::cmp::Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Top-`n` chunks by score; `n > M` returns all of them.
pub fn select_top_n(scores: &[f64], n: usize) -> SelectionSet {
    let all: Vec<usize> = (0..scores.len()).collect();
    select_top_n_among(scores, &all, n)
}

/// Top-`n` restricted to `candidates`.
pub fn select_top_n_among(scores: &[f64], candidates: &[usize], n: usize) -> SelectionSet {
    let mut idx = candidates.to_vec();
    let cmp = by_score_then_index(scores);
    let n = n.min(idx.len());
    if n == 0 {
        return SelectionSet::default();
    }
    if n < idx.len() {
        idx.select_nth_unstable_by(n - 1, &cmp);
        idx.truncate(n);
    }
    idx.sort_by(&cmp);
    SelectionSet {
        scores: idx.iter().map(|&i| scores[i]).collect(),
        indices: idx,
    }
}

/// Reorder the members of `s0` by `scores`; equal scores keep their `s0` order.
pub fn rerank(s0: &SelectionSet, scores: &ScoreVector) -> SelectionSet {
    let mut order: Vec<usize> = (0..s0.len()).collect();
    order.sort_by(|&a, &b| {
        scores.values[s0.indices[b]]
            .total_cmp(&scores.values[s0.indices[a]])
            .then(a.cmp(&b))
    });
    let indices: Vec<usize> = order.iter().map(|&o| s0.indices[o]).collect();
    SelectionSet {
        scores: indices.iter().map(|&i| scores.values[i]).collect(),
        indices,
    }
}

/// How `S₀` scores a chunk against the question's encoder states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialScoring {
    /// MaxSim of normalized question rows against the chunk's rows.
    MaxSim,
    /// Cosine between the mean question row and the mean chunk row.
    Cosine,
}

/// Which stored rows chunk scoring reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowSource {
    Pooled,
    Full,
}

/// The frozen model together with one chunk pool, ready for scoring.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub model: &'a Model,
    pub pool: &'a ChunkPool,
    pub pooled: &'a PooledIndex,
    pub rows: RowSource,
}

impl<'a> Engine<'a> {
    pub fn new(model: &'a Model, pool: &'a ChunkPool, pooled: &'a PooledIndex) -> Result<Self> {
        if pool.d() != model.config().d || pooled.d() != pool.d() || pooled.len() != pool.len() {
            return Err(IntraError::Shape(
                "pool, pooled index and model widths or chunk counts disagree".into(),
            ));
        }
        if pool.is_empty() {
            return Err(IntraError::EmptyInput("chunk pool".into()));
        }
        Ok(Self {
            model,
            pool,
            pooled,
            rows: RowSource::Pooled,
        })
    }

    pub fn with_rows(mut self, rows: RowSource) -> Self {
        self.rows = rows;
        self
    }

    /// Scoring rows of chunk `index`.
    #[inline]
    pub fn chunk_rows(&self, index: usize) -> &'a [f64] {
        match self.rows {
            RowSource::Pooled => self.pooled.rows(index),
            RowSource::Full => self.pool.chunk_rows(index),
        }
    }

    pub fn scale(&self) -> f64 {
        self.model.config().attn_scale()
    }

    /// Normalized encoder states of the question.
    pub fn question_rows(&self, question: &[u32]) -> Result<Matrix> {
        if question.is_empty() {
            return Err(IntraError::EmptyInput("question".into()));
        }
        self.model
            .encode(question)?
            .normalized(self.model.config().rmsnorm_eps)
    }

    pub fn initial_scores(&self, question: &[u32], scoring: InitialScoring) -> Result<ScoreVector> {
        let q = self.question_rows(question)?;
        let d = self.pool.d();
        let values = match scoring {
            InitialScoring::MaxSim => {
                let scale = self.scale();
                (0..self.pool.len())
                    .into_par_iter()
                    .map(|i| maxsim_unchecked(q.as_slice(), self.chunk_rows(i), d, scale))
                    .collect()
            }
            InitialScoring::Cosine => {
                let qm = mean_row(q.as_slice(), d);
                (0..self.pool.len())
                    .into_par_iter()
                    .map(|i| cosine(&qm, &mean_row(self.chunk_rows(i), d)))
                    .collect()
            }
        };
        Ok(ScoreVector {
            stage: Stage::Initial,
            values,
        })
    }

    /// `S₀`: the top-`n₀` chunks by encoder MaxSim with the question.
    pub fn initial_selection(
        &self,
        question: &[u32],
        n0: usize,
    ) -> Result<(ScoreVector, SelectionSet)> {
        self.initial_selection_with(question, n0, InitialScoring::MaxSim)
    }

    pub fn initial_selection_with(
        &self,
        question: &[u32],
        n0: usize,
        scoring: InitialScoring,
    ) -> Result<(ScoreVector, SelectionSet)> {
        let scores = self.initial_scores(question, scoring)?;
        let sel = select_top_n(&scores.values, n0);
        Ok((scores, sel))
    }

    /// Decoder input `[embed(question); ρ]` and the rows holding the retrieval tokens.
    pub fn retrieval_input(
        &self,
        question: &[u32],
        params: &RetrievalParams,
    ) -> Result<(Matrix, Vec<usize>)> {
        if question.is_empty() {
            return Err(IntraError::EmptyInput("question".into()));
        }
        params.check(self.model.config())?;
        let mut input = self.model.embed_tokens(question)?;
        input.append(&params.rho);
        let positions = (question.len()..question.len() + params.r()).collect();
        Ok((input, positions))
    }

    /// Cross-attention memory made of the full-resolution rows of `selection`, in order.
    pub fn context_for(&self, selection: &[usize]) -> Result<CrossContext> {
        if let Some(&bad) = selection.iter().find(|&&i| i >= self.pool.len()) {
            return Err(IntraError::InvalidArgument(format!(
                "chunk index {bad} outside the pool"
            )));
        }
        self.model
            .prepare_context(self.pool.context_rows(selection))
    }

    /// Lifted decoder queries at the retrieval-token positions, with `S₀` as context.
    pub fn retrieval_queries(
        &self,
        question: &[u32],
        params: &RetrievalParams,
        s0: &SelectionSet,
    ) -> Result<ExposedQueries> {
        let (input, positions) = self.retrieval_input(question, params)?;
        let ctx = self.context_for(&s0.indices)?;
        match self
            .model
            .decoder_forward(&input, &ctx, ForwardMode::ExposeQueries(&positions))?
        {
            DecoderOutput::Queries(q) => Ok(q),
            DecoderOutput::Logits(_) => unreachable!("expose mode returns queries"),
        }
    }

    /// `s_i = Σ_{ℓ,h} α_{ℓ,h} · MaxSim(q̃_{ℓ,h}, rows_i)` for every chunk, or only for
    /// `candidates` (others get `-∞`).
    pub fn score_queries(
        &self,
        queries: &ExposedQueries,
        alpha: &Matrix,
        candidates: Option<&[usize]>,
    ) -> ScoreVector {
        let d = queries.d;
        let scale = self.scale();
        let score = |i: usize| {
            let rows = self.chunk_rows(i);
            let mut s = 0.0;
            for l in 0..queries.layers {
                for h in 0..queries.heads {
                    let a = alpha.get(l, h);
                    if a != 0.0 {
                        s += a * maxsim_unchecked(queries.block(l, h), rows, d, scale);
                    }
                }
            }
            s
        };
        let values = match candidates {
            None => (0..self.pool.len()).into_par_iter().map(score).collect(),
            Some(c) => {
                let mut v = vec![f64::NEG_INFINITY; self.pool.len()];
                let got: Vec<f64> = c.par_iter().map(|&i| score(i)).collect();
                for (&i, s) in c.iter().zip(got) {
                    v[i] = s;
                }
                v
            }
        };
        ScoreVector {
            stage: Stage::Intra,
            values,
        }
    }

    /// Decoder-query scores over the whole pool.
    pub fn intra_scores(
        &self,
        question: &[u32],
        params: &RetrievalParams,
        s0: &SelectionSet,
    ) -> Result<ScoreVector> {
        let q = self.retrieval_queries(question, params, s0)?;
        let scores = self.score_queries(&q, &params.alpha, None);
        if scores.values.iter().any(|v| !v.is_finite()) {
            return Err(IntraError::NonFinite("chunk scores".into()));
        }
        Ok(scores)
    }
}

pub(crate) fn mean_row(rows: &[f64], d: usize) -> Vec<f64> {
    let n = (rows.len() / d) as f64;
    let mut m = vec![0.0; d];
    for r in rows.chunks_exact(d) {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub chunk_id: u64,
    pub score: f64,
}

/// One JSON line of retrieval output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub query_id: u64,
    pub stage: Stage,
    pub top: Vec<TopEntry>,
    pub params_hash: Option<String>,
}

impl ScoreRecord {
    pub fn new(
        query_id: u64,
        stage: Stage,
        sel: &SelectionSet,
        pool: &ChunkPool,
        params_hash: Option<String>,
    ) -> Self {
        Self {
            query_id,
            stage,
            top: sel
                .indices
                .iter()
                .zip(&sel.scores)
                .map(|(&i, &score)| TopEntry {
                    chunk_id: pool.id(i),
                    score,
                })
                .collect(),
            params_hash,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn top_n_tie_rule_and_edges() {
        let s = [0.1, 0.9, 0.5, 0.9];
        assert_eq!(select_top_n(&s, 2).indices, vec![1, 3]);
        assert!(select_top_n(&s, 0).is_empty());
        assert_eq!(select_top_n(&s, 4).indices, vec![1, 3, 2, 0]);
        assert_eq!(select_top_n(&s, 10).indices, vec![1, 3, 2, 0]);
        assert_eq!(select_top_n_among(&s, &[0, 2], 5).indices, vec![2, 0]);
    }

    #[test]
    fn rerank_is_stable_permutation() {
        let s0 = SelectionSet {
            indices: vec![4, 1, 3],
            scores: vec![3.0, 2.0, 1.0],
        };
        let flat = ScoreVector {
            stage: Stage::Intra,
            values: vec![0.0; 5],
        };
        assert_eq!(rerank(&s0, &flat).indices, vec![4, 1, 3]);
        let s = ScoreVector {
            stage: Stage::Intra,
            values: vec![9.0, 0.5, 0.0, 0.7, 0.1],
        };
        let r = rerank(&s0, &s);
        assert_eq!(r.indices, vec![3, 1, 4]);
        assert_eq!(r.scores, vec![0.7, 0.5, 0.1]);
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[2.0, 2.0]) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn top_n_is_a_prefix_of_the_full_order(
            scores in prop::collection::vec(-5i32..5, 1..40),
            n in 0usize..45,
        ) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let full = select_top_n(&s, s.len());
            let top = select_top_n(&s, n);
            prop_assert_eq!(&full.indices[..top.len()], &top.indices[..]);
            let bigger = select_top_n(&s, n + 1);
            prop_assert!(top.indices.iter().all(|i| bigger.contains(*i)));
        }
    }
}
