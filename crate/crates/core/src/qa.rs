//! Question answering over the pool (retrieve, assemble, generate) and the
//! evaluation metrics.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    bm25_rank, encoder_maxsim_rank, hybrid_rank, tfidf_rank, LexicalIndex, BM25_B, BM25_K1,
};
use crate::data::QAExample;
use crate::error::{IntraError, Result};
use crate::retrieval::{
    rerank, select_top_n, Engine, InitialScoring, RetrievalParams, ScoreVector, SelectionSet,
};

pub const RECALL_KS: [usize; 3] = [5, 10, 20];
pub const CONTEXT_SIZE: usize = 5;

/// First four of `s_intra`, then the best `S₀` member not already present.
pub fn assemble_context(s_intra: &[usize], s0: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = s_intra.iter().take(CONTEXT_SIZE - 1).copied().collect();
    if let Some(&extra) = s0.iter().find(|i| !out.contains(i)) {
        out.push(extra);
    }
    out
}

/// 1 iff every oracle chunk is among the first `k` retrieved.
pub fn complete_evidence_recall<T: PartialEq>(
    retrieved: &[T],
    oracle: &[T],
    k: usize,
) -> Result<bool> {
    if oracle.is_empty() {
        return Err(IntraError::EmptyInput("oracle set".into()));
    }
    if k == 0 {
        return Err(IntraError::InvalidArgument(
            "recall cutoff must be at least 1".into(),
        ));
    }
    let top = &retrieved[..k.min(retrieved.len())];
    Ok(oracle.iter().all(|o| top.contains(o)))
}

pub fn exact_match(pred: &[u32], gold: &[u32]) -> bool {
    pred == gold
}

/// Harmonic mean of token-multiset precision and recall.
pub fn token_f1(pred: &[u32], gold: &[u32]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred == gold { 1.0 } else { 0.0 };
    }
    let mut remaining = gold.to_vec();
    let mut common = 0usize;
    for t in pred {
        if let Some(p) = remaining.iter().position(|g| g == t) {
            remaining.swap_remove(p);
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Percentage of the random-to-complete EM gap closed.
pub fn gap_closure(em: f64, em_random: f64, em_complete: f64) -> Result<f64> {
    let denom = em_complete - em_random;
    if denom == 0.0 {
        return Err(IntraError::Undefined(
            "gap closure: complete-evidence and random EM are equal".into(),
        ));
    }
    Ok(100.0 * ((em - em_random) / denom))
}

/// Normal-approximation 95% half-width for a rate over `n` trials.
pub fn ci_half_width(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    1.96 * (p * (1.0 - p) / n as f64).sqrt()
}

/// How the generation context is built from the final selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextRule {
    /// Four from the final selection plus one from `S₀`.
    FourPlusOne,
    /// The first five of the final selection.
    TopFive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QaConfig {
    pub n0: usize,
    pub n: usize,
    pub max_answer_len: usize,
    pub context_rule: ContextRule,
    pub initial_scoring: InitialScoring,
    /// Use `S₀` itself as the final selection.
    pub initial_only: bool,
    pub random_seed: u64,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            n0: 8,
            n: 5,
            max_answer_len: 8,
            context_rule: ContextRule::FourPlusOne,
            initial_scoring: InitialScoring::MaxSim,
            initial_only: false,
            random_seed: 0,
        }
    }
}

impl QaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(IntraError::Config("n must be at least 1".into()));
        }
        if self.max_answer_len == 0 {
            return Err(IntraError::Config(
                "max_answer_len must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Both scoring passes for one question.
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub initial: ScoreVector,
    pub s0: SelectionSet,
    pub intra: Option<ScoreVector>,
    /// Final selection over the whole pool, long enough for every recall cutoff.
    pub selection: SelectionSet,
}

impl Retrieval {
    pub fn context(&self, cfg: &QaConfig) -> Vec<usize> {
        let top = &self.selection.indices[..cfg.n.min(self.selection.len())];
        match cfg.context_rule {
            ContextRule::FourPlusOne => assemble_context(top, &self.s0.indices),
            ContextRule::TopFive => top.iter().take(CONTEXT_SIZE).copied().collect(),
        }
    }
}

/// Evaluation modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Initial,
    Rerank,
    Intra,
    Random,
    Complete,
    Tfidf,
    Bm25,
    Hybrid,
    EncoderMaxsim,
}

impl Mode {
    pub const ALL: [Mode; 9] = [
        Mode::Initial,
        Mode::Rerank,
        Mode::Intra,
        Mode::Random,
        Mode::Complete,
        Mode::Tfidf,
        Mode::Bm25,
        Mode::Hybrid,
        Mode::EncoderMaxsim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Initial => "initial",
            Mode::Rerank => "rerank",
            Mode::Intra => "intra",
            Mode::Random => "random",
            Mode::Complete => "complete",
            Mode::Tfidf => "tfidf",
            Mode::Bm25 => "bm25",
            Mode::Hybrid => "hybrid",
            Mode::EncoderMaxsim => "encoder-maxsim",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = IntraError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| IntraError::InvalidArgument(format!("unknown evaluation mode `{s}`")))
    }
}

/// Everything needed to answer questions against one pool.
pub struct Pipeline<'a> {
    pub engine: Engine<'a>,
    pub params: &'a RetrievalParams,
    pub config: QaConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(engine: Engine<'a>, params: &'a RetrievalParams, config: QaConfig) -> Result<Self> {
        config.validate()?;
        params.check(engine.model.config())?;
        Ok(Self {
            engine,
            params,
            config,
        })
    }

    fn recall_depth(&self) -> usize {
        RECALL_KS[RECALL_KS.len() - 1].max(self.config.n)
    }

    /// Initial selection followed by decoder-query scoring over the whole pool.
    pub fn retrieve(&self, question: &[u32]) -> Result<Retrieval> {
        let cfg = &self.config;
        let (initial, s0) =
            self.engine
                .initial_selection_with(question, cfg.n0, cfg.initial_scoring)?;
        if cfg.initial_only {
            return Ok(Retrieval {
                selection: s0.clone(),
                initial,
                s0,
                intra: None,
            });
        }
        let intra = self.engine.intra_scores(question, self.params, &s0)?;
        let selection = select_top_n(&intra.values, self.recall_depth());
        Ok(Retrieval {
            initial,
            s0,
            intra: Some(intra),
            selection,
        })
    }

    /// Greedy answer conditioned on the full-resolution rows of `context`.
    pub fn generate(&self, question: &[u32], context: &[usize]) -> Result<Vec<u32>> {
        let ctx = self.engine.context_for(context)?;
        self.engine
            .model
            .greedy_decode(question, &ctx, self.config.max_answer_len)
    }

    pub fn answer(&self, question: &[u32]) -> Result<Vec<u32>> {
        let r = self.retrieve(question)?;
        self.generate(question, &r.context(&self.config))
    }

    /// Ranked chunks and generation context for one example under `mode`.
    fn mode_selection(
        &self,
        ex: &QAExample,
        mode: Mode,
        lexical: &LexicalIndex,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let depth = self.recall_depth();
        let pool = self.engine.pool;
        let q = &ex.question;
        let top_context = |r: &[usize]| r.iter().take(CONTEXT_SIZE).copied().collect::<Vec<_>>();
        Ok(match mode {
            Mode::Initial => {
                let (scores, s0) = self.engine.initial_selection_with(
                    q,
                    self.config.n0,
                    self.config.initial_scoring,
                )?;
                let ranked = select_top_n(&scores.values, depth).indices;
                let ctx = assemble_context(&s0.indices, &s0.indices);
                (ranked, ctx)
            }
            Mode::Rerank => {
                let (scores, s0) = self.engine.initial_selection_with(
                    q,
                    self.config.n0,
                    self.config.initial_scoring,
                )?;
                let intra = self.engine.intra_scores(q, self.params, &s0)?;
                let reranked = rerank(&s0, &intra);
                let mut ranked = reranked.indices.clone();
                for i in select_top_n(&scores.values, depth).indices {
                    if ranked.len() >= depth {
                        break;
                    }
                    if !ranked.contains(&i) {
                        ranked.push(i);
                    }
                }
                let ctx = assemble_context(&reranked.indices, &s0.indices);
                (ranked, ctx)
            }
            Mode::Intra => {
                let r = self.retrieve(q)?;
                let ctx = r.context(&self.config);
                (r.selection.indices, ctx)
            }
            Mode::Random => {
                let oracle: HashSet<usize> = oracle_set(pool, ex)?;
                let free: Vec<usize> = (0..pool.len()).filter(|i| !oracle.contains(i)).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.config.random_seed ^ ex.id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let k = CONTEXT_SIZE.min(free.len());
                let picks: Vec<usize> = sample(&mut rng, free.len(), k)
                    .into_iter()
                    .map(|j| free[j])
                    .collect();
                (picks.clone(), picks)
            }
            Mode::Complete => {
                let mut ids = ex.oracle_chunk_ids.clone();
                ids.sort_unstable();
                let idx = ids
                    .iter()
                    .map(|&id| pool.index_of(id))
                    .collect::<Result<Vec<_>>>()?;
                (idx.clone(), idx)
            }
            Mode::Tfidf => {
                let r = tfidf_rank(q, lexical, depth).indices;
                let c = top_context(&r);
                (r, c)
            }
            Mode::Bm25 => {
                let r = bm25_rank(q, lexical, depth, BM25_K1, BM25_B).indices;
                let c = top_context(&r);
                (r, c)
            }
            Mode::Hybrid => {
                let r = hybrid_rank(q, lexical, &self.engine, depth)?.indices;
                let c = top_context(&r);
                (r, c)
            }
            Mode::EncoderMaxsim => {
                let r = encoder_maxsim_rank(q, &self.engine, depth)?.indices;
                let c = top_context(&r);
                (r, c)
            }
        })
    }

    pub fn evaluate_example(
        &self,
        ex: &QAExample,
        mode: Mode,
        lexical: &LexicalIndex,
    ) -> Result<ExampleOutcome> {
        ex.validate()?;
        let (ranked, context) = self.mode_selection(ex, mode, lexical)?;
        let oracle: Vec<usize> = ex
            .oracle_chunk_ids
            .iter()
            .map(|&id| self.engine.pool.index_of(id))
            .collect::<Result<_>>()?;
        let mut recall = [false; 3];
        for (r, &k) in recall.iter_mut().zip(&RECALL_KS) {
            *r = complete_evidence_recall(&ranked, &oracle, k)?;
        }
        let prediction = self.generate(&ex.question, &context)?;
        let pool = self.engine.pool;
        Ok(ExampleOutcome {
            id: ex.id,
            retrieved: ranked.iter().map(|&i| pool.id(i)).collect(),
            context: context.iter().map(|&i| pool.id(i)).collect(),
            em: exact_match(&prediction, &ex.answer),
            f1: token_f1(&prediction, &ex.answer),
            prediction,
            recall,
        })
    }

    /// Outcomes for every mode, each in dataset order.
    pub fn evaluate_detailed(
        &self,
        dataset: &[QAExample],
        modes: &[Mode],
        lexical: &LexicalIndex,
    ) -> Result<Vec<(Mode, Vec<ExampleOutcome>)>> {
        if dataset.is_empty() {
            return Err(IntraError::EmptyInput("evaluation dataset".into()));
        }
        if lexical.len() != self.engine.pool.len() {
            return Err(IntraError::Shape(
                "lexical index and pool sizes differ".into(),
            ));
        }
        modes
            .iter()
            .map(|&mode| {
                let outcomes = dataset
                    .par_iter()
                    .map(|ex| self.evaluate_example(ex, mode, lexical))
                    .collect::<Result<Vec<_>>>()?;
                Ok((mode, outcomes))
            })
            .collect()
    }

    pub fn evaluate(
        &self,
        benchmark: &str,
        dataset: &[QAExample],
        modes: &[Mode],
        lexical: &LexicalIndex,
    ) -> Result<EvalReport> {
        Ok(summarize(
            benchmark,
            &self.evaluate_detailed(dataset, modes, lexical)?,
        ))
    }
}

fn oracle_set(pool: &crate::store::ChunkPool, ex: &QAExample) -> Result<HashSet<usize>> {
    ex.oracle_chunk_ids
        .iter()
        .map(|&id| pool.index_of(id))
        .collect()
}

/// Per-example result under one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub id: u64,
    pub retrieved: Vec<u64>,
    pub context: Vec<u64>,
    pub prediction: Vec<u32>,
    pub em: bool,
    pub f1: f64,
    /// Complete-evidence recall at each cutoff in `RECALL_KS`.
    pub recall: [bool; 3],
}

/// A rate with its 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub ci: f64,
}

impl Rate {
    fn of(hits: impl Iterator<Item = f64>, n: usize) -> Self {
        let value = if n == 0 {
            0.0
        } else {
            hits.sum::<f64>() / n as f64
        };
        Self {
            value,
            ci: ci_half_width(value.clamp(0.0, 1.0), n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: Mode,
    pub n: usize,
    pub recall_at_5: Rate,
    pub recall_at_10: Rate,
    pub recall_at_20: Rate,
    pub em: Rate,
    pub f1: Rate,
    /// Present when random and complete modes were both evaluated and their EM differ.
    pub gap_closure: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: String,
    pub n_examples: usize,
    pub modes: Vec<ModeReport>,
}

impl EvalReport {
    pub fn mode(&self, mode: Mode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "benchmark,mode,n,recall_at_5,recall_at_5_ci,recall_at_10,recall_at_10_ci,recall_at_20,recall_at_20_ci,em,em_ci,f1,f1_ci,gap_closure\n",
        );
        for m in &self.modes {
            let gap = m.gap_closure.map(|g| g.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                self.benchmark,
                m.mode,
                m.n,
                m.recall_at_5.value,
                m.recall_at_5.ci,
                m.recall_at_10.value,
                m.recall_at_10.ci,
                m.recall_at_20.value,
                m.recall_at_20.ci,
                m.em.value,
                m.em.ci,
                m.f1.value,
                m.f1.ci,
                gap
            ));
        }
        s
    }
}

pub fn summarize(benchmark: &str, results: &[(Mode, Vec<ExampleOutcome>)]) -> EvalReport {
    let mut modes: Vec<ModeReport> = results
        .iter()
        .map(|(mode, out)| {
            let n = out.len();
            let recall = |j: usize| Rate::of(out.iter().map(|o| o.recall[j] as u8 as f64), n);
            ModeReport {
                mode: *mode,
                n,
                recall_at_5: recall(0),
                recall_at_10: recall(1),
                recall_at_20: recall(2),
                em: Rate::of(out.iter().map(|o| o.em as u8 as f64), n),
                f1: Rate::of(out.iter().map(|o| o.f1), n),
                gap_closure: None,
            }
        })
        .collect();
    let em_of =
        |ms: &[ModeReport], mode: Mode| ms.iter().find(|m| m.mode == mode).map(|m| m.em.value);
    if let (Some(r), Some(c)) = (em_of(&modes, Mode::Random), em_of(&modes, Mode::Complete)) {
        for m in &mut modes {
            m.gap_closure = gap_closure(m.em.value, r, c).ok();
        }
    }
    EvalReport {
        benchmark: benchmark.to_string(),
        n_examples: results.first().map(|r| r.1.len()).unwrap_or(0),
        modes,
    }
}
