//! Lexical and encoder-space retrieval baselines over token-id chunks.

use std::collections::HashMap;

use crate::data::Chunk;
use crate::error::{IntraError, Result};
use crate::retrieval::{cosine, select_top_n, Engine, SelectionSet};

/// Document frequencies and per-chunk term counts; each token id is a term.
#[derive(Debug, Clone)]
pub struct LexicalIndex {
    df: HashMap<u32, usize>,
    tf: Vec<HashMap<u32, usize>>,
    lens: Vec<usize>,
    avg_len: f64,
}

impl LexicalIndex {
    /// Chunks in pool order.
    pub fn build(chunks: &[Chunk]) -> Self {
        let mut df = HashMap::new();
        let mut tf = Vec::with_capacity(chunks.len());
        let mut lens = Vec::with_capacity(chunks.len());
        for c in chunks {
            let mut counts: HashMap<u32, usize> = HashMap::new();
            for &t in &c.tokens {
                *counts.entry(t).or_default() += 1;
            }
            for &t in counts.keys() {
                *df.entry(t).or_default() += 1;
            }
            lens.push(c.tokens.len());
            tf.push(counts);
        }
        let avg_len = if lens.is_empty() {
            0.0
        } else {
            lens.iter().sum::<usize>() as f64 / lens.len() as f64
        };
        Self {
            df,
            tf,
            lens,
            avg_len,
        }
    }

    pub fn len(&self) -> usize {
        self.tf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tf.is_empty()
    }

    pub fn df(&self, term: u32) -> usize {
        self.df.get(&term).copied().unwrap_or(0)
    }

    fn tfidf_idf(&self, term: u32) -> f64 {
        (self.len() as f64 / (1.0 + self.df(term) as f64)).ln()
    }

    /// Cosine between tf·idf vectors of the question and every chunk.
    pub fn tfidf_scores(&self, question: &[u32]) -> Vec<f64> {
        let mut q: HashMap<u32, usize> = HashMap::new();
        for &t in question {
            *q.entry(t).or_default() += 1;
        }
        let qv: HashMap<u32, f64> = q
            .iter()
            .map(|(&t, &c)| (t, c as f64 * self.tfidf_idf(t)))
            .collect();
        let qn = qv.values().map(|v| v * v).sum::<f64>().sqrt();
        self.tf
            .iter()
            .map(|doc| {
                let mut dotp = 0.0;
                let mut dn = 0.0;
                for (&t, &c) in doc {
                    let w = c as f64 * self.tfidf_idf(t);
                    dn += w * w;
                    if let Some(qw) = qv.get(&t) {
                        dotp += qw * w;
                    }
                }
                let denom = qn * dn.sqrt();
                if denom == 0.0 {
                    0.0
                } else {
                    dotp / denom
                }
            })
            .collect()
    }

    /// Okapi BM25 with `idf = ln((M − df + 0.5) / (df + 0.5) + 1)`.
    pub fn bm25_scores(&self, question: &[u32], k1: f64, b: f64) -> Vec<f64> {
        let m = self.len() as f64;
        self.tf
            .iter()
            .zip(&self.lens)
            .map(|(doc, &len)| {
                let norm = if self.avg_len > 0.0 {
                    1.0 - b + b * len as f64 / self.avg_len
                } else {
                    1.0
                };
                question
                    .iter()
                    .map(|t| {
                        let f = doc.get(t).copied().unwrap_or(0) as f64;
                        if f == 0.0 {
                            return 0.0;
                        }
                        let df = self.df(*t) as f64;
                        let idf = ((m - df + 0.5) / (df + 0.5) + 1.0).ln();
                        idf * f * (k1 + 1.0) / (f + k1 * norm)
                    })
                    .sum()
            })
            .collect()
    }
}

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
pub const RRF_K: f64 = 60.0;

pub fn tfidf_rank(question: &[u32], index: &LexicalIndex, k: usize) -> SelectionSet {
    select_top_n(&index.tfidf_scores(question), k)
}

pub fn bm25_rank(
    question: &[u32],
    index: &LexicalIndex,
    k: usize,
    k1: f64,
    b: f64,
) -> SelectionSet {
    select_top_n(&index.bm25_scores(question, k1, b), k)
}

/// Reciprocal rank fusion with 1-based ranks; chunks absent from every input are never returned.
pub fn rrf_fuse(rankings: &[SelectionSet], k_rrf: f64, k: usize) -> Result<SelectionSet> {
    if rankings.is_empty() {
        return Err(IntraError::InvalidArgument(
            "rank fusion needs at least one ranking".into(),
        ));
    }
    let mut fused: HashMap<usize, f64> = HashMap::new();
    for r in rankings {
        for (rank, &i) in r.indices.iter().enumerate() {
            *fused.entry(i).or_default() += 1.0 / (k_rrf + (rank + 1) as f64);
        }
    }
    let mut items: Vec<(usize, f64)> = fused.into_iter().collect();
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    items.truncate(k);
    Ok(SelectionSet {
        indices: items.iter().map(|x| x.0).collect(),
        scores: items.iter().map(|x| x.1).collect(),
    })
}

/// Hybrid: fuse the full BM25 and encoder-MaxSim orderings.
pub fn hybrid_rank(
    question: &[u32],
    index: &LexicalIndex,
    engine: &Engine<'_>,
    k: usize,
) -> Result<SelectionSet> {
    let m = index.len();
    let lexical = bm25_rank(question, index, m, BM25_K1, BM25_B);
    let dense = encoder_maxsim_rank(question, engine, m)?;
    rrf_fuse(&[lexical, dense], RRF_K, k)
}

/// Encoder-space MaxSim, the same scoring as the initial selection.
pub fn encoder_maxsim_rank(
    question: &[u32],
    engine: &Engine<'_>,
    k: usize,
) -> Result<SelectionSet> {
    Ok(engine.initial_selection(question, k)?.1)
}

/// Cosine between the mean question row and each chunk's mean pooled row.
pub fn mean_vector_cosine_rank(
    question: &[u32],
    engine: &Engine<'_>,
    k: usize,
) -> Result<SelectionSet> {
    let q = engine.question_rows(question)?;
    let qm = crate::retrieval::mean_row(q.as_slice(), q.cols());
    let scores: Vec<f64> = (0..engine.pool.len())
        .map(|i| cosine(&qm, &engine.pooled.mean_vector(i)))
        .collect();
    Ok(select_top_n(&scores, k))
}
