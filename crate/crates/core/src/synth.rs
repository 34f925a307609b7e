//! Seeded synthetic retrieval-QA corpora over token ids.
//!
//! Each example owns `hops` oracle chunks. The question is the union of one key
//! set per oracle chunk. With two hops, the first oracle also carries bridge
//! tokens that reappear in the second oracle next to the answer, and hard
//! distractors repeat the second key set without the bridge, so the second
//! oracle is only separable once the first has been read.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Chunk, QAExample};
use crate::error::{IntraError, Result};
use crate::model::FIRST_CONTENT_TOKEN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub seed: u64,
    /// Pool size.
    pub m: usize,
    /// Chunk length.
    pub l_c: usize,
    pub vocab_size: usize,
    pub n_examples: usize,
    /// Oracle chunks per example (1 or 2).
    pub hops: usize,
    pub key_tokens: usize,
    pub bridge_tokens: usize,
    pub answer_tokens: usize,
    /// Fraction of the non-oracle chunks that repeat an example's last key set.
    pub distractor_overlap: f64,
    /// Fraction of examples held out for evaluation.
    pub eval_fraction: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            m: 512,
            l_c: 16,
            vocab_size: 256,
            n_examples: 200,
            hops: 2,
            key_tokens: 3,
            bridge_tokens: 2,
            answer_tokens: 2,
            distractor_overlap: 0.5,
            eval_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub chunks: Vec<Chunk>,
    pub train: Vec<QAExample>,
    pub eval: Vec<QAExample>,
}

impl SyntheticTaskSpec {
    fn content_vocab(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_CONTENT_TOKEN as usize)
    }

    /// Tokens an oracle chunk of hop `h` must hold.
    fn oracle_payload(&self, hop: usize) -> usize {
        let last = hop + 1 == self.hops;
        let mut n = self.key_tokens;
        if self.hops == 2 {
            n += self.bridge_tokens;
        }
        if last {
            n += self.answer_tokens;
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(IntraError::Config(format!(
                "infeasible synthetic task: {msg}"
            )))
        };
        if !(1..=2).contains(&self.hops) {
            return bad(format!("hops must be 1 or 2, got {}", self.hops));
        }
        if self.key_tokens == 0 || self.answer_tokens == 0 {
            return bad("key and answer token counts must be positive".into());
        }
        if self.hops == 2 && self.bridge_tokens == 0 {
            return bad("two-hop examples need at least one bridge token".into());
        }
        if self.n_examples == 0 {
            return bad("no examples requested".into());
        }
        for h in 0..self.hops {
            if self.oracle_payload(h) > self.l_c {
                return bad(format!(
                    "an oracle chunk needs {} tokens but chunks hold {}",
                    self.oracle_payload(h),
                    self.l_c
                ));
            }
        }
        let distinct =
            self.hops * self.key_tokens + self.bridge_tokens * (self.hops - 1) + self.answer_tokens;
        if distinct > self.content_vocab() {
            return bad(format!(
                "{distinct} distinct tokens per example exceed the content vocabulary"
            ));
        }
        if self.hops * self.n_examples > self.m {
            return bad(format!(
                "{} oracle chunks do not fit in a pool of {}",
                self.hops * self.n_examples,
                self.m
            ));
        }
        if !(0.0..=1.0).contains(&self.distractor_overlap)
            || !(0.0..1.0).contains(&self.eval_fraction)
        {
            return bad("distractor_overlap must lie in [0, 1] and eval_fraction in [0, 1)".into());
        }
        let n_eval = self.n_eval();
        if n_eval == 0 || n_eval == self.n_examples {
            return bad(format!("eval split of {n_eval} leaves an empty split"));
        }
        Ok(())
    }

    fn n_eval(&self) -> usize {
        ((self.n_examples as f64) * self.eval_fraction).round() as usize
    }
}

fn random_token(rng: &mut ChaCha8Rng, spec: &SyntheticTaskSpec) -> u32 {
    FIRST_CONTENT_TOKEN + rng.random_range(0..spec.content_vocab()) as u32
}

/// Fill `payload` up to `l_c` with random tokens and shuffle.
fn make_chunk(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticTaskSpec,
    payload: &[u32],
    keep_order: &[u32],
) -> Vec<u32> {
    let mut tokens = payload.to_vec();
    while tokens.len() + keep_order.len() < spec.l_c {
        tokens.push(random_token(rng, spec));
    }
    tokens.shuffle(rng);
    // the answer stays a contiguous run so it is a subsequence of the chunk
    let at = rng.random_range(0..=tokens.len());
    tokens.splice(at..at, keep_order.iter().copied());
    tokens
}

/// Question, answer, oracle slots and last-hop keys of an example in progress.
type Draft = (Vec<u32>, Vec<u32>, Vec<usize>, Vec<u32>);

pub fn generate(spec: &SyntheticTaskSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chunk_tokens: Vec<Vec<u32>> = Vec::with_capacity(spec.m);
    let mut examples: Vec<Draft> = Vec::with_capacity(spec.n_examples);

    for _ in 0..spec.n_examples {
        let distinct =
            spec.hops * spec.key_tokens + spec.bridge_tokens * (spec.hops - 1) + spec.answer_tokens;
        let pool: Vec<u32> = rand::seq::index::sample(&mut rng, spec.content_vocab(), distinct)
            .into_iter()
            .map(|t| FIRST_CONTENT_TOKEN + t as u32)
            .collect();
        let mut it = pool.into_iter();
        let keys: Vec<Vec<u32>> = (0..spec.hops)
            .map(|_| it.by_ref().take(spec.key_tokens).collect())
            .collect();
        let bridge: Vec<u32> = it
            .by_ref()
            .take(spec.bridge_tokens * (spec.hops - 1))
            .collect();
        let answer: Vec<u32> = it.by_ref().take(spec.answer_tokens).collect();

        let mut oracle_slots = Vec::with_capacity(spec.hops);
        for (h, k) in keys.iter().enumerate() {
            let last = h + 1 == spec.hops;
            let mut payload = k.clone();
            payload.extend(&bridge);
            let tokens = if last {
                make_chunk(&mut rng, spec, &payload, &answer)
            } else {
                make_chunk(&mut rng, spec, &payload, &[])
            };
            oracle_slots.push(chunk_tokens.len());
            chunk_tokens.push(tokens);
        }
        let mut question: Vec<u32> = keys.concat();
        question.shuffle(&mut rng);
        examples.push((
            question,
            answer,
            oracle_slots,
            keys.last().cloned().unwrap_or_default(),
        ));
    }

    let n_free = spec.m - chunk_tokens.len();
    let n_hard = ((n_free as f64) * spec.distractor_overlap).round() as usize;
    for j in 0..n_free {
        if j < n_hard {
            let last_keys = &examples[j % examples.len()].3;
            chunk_tokens.push(make_chunk(&mut rng, spec, last_keys, &[]));
        } else {
            let tokens = (0..spec.l_c)
                .map(|_| random_token(&mut rng, spec))
                .collect();
            chunk_tokens.push(tokens);
        }
    }

    // chunk ids are a seeded permutation so pool order carries no signal
    let mut ids: Vec<u64> = (0..spec.m as u64).collect();
    ids.shuffle(&mut rng);
    let mut chunks: Vec<Chunk> = chunk_tokens
        .into_iter()
        .zip(&ids)
        .map(|(tokens, &chunk_id)| Chunk { chunk_id, tokens })
        .collect();
    chunks.sort_by_key(|c| c.chunk_id);

    let mut all: Vec<QAExample> = examples
        .into_iter()
        .enumerate()
        .map(|(i, (question, answer, slots, _))| QAExample {
            id: i as u64,
            question,
            answer,
            oracle_chunk_ids: slots.iter().map(|&s| ids[s]).collect(),
        })
        .collect();
    let eval = all.split_off(spec.n_examples - spec.n_eval());
    Ok(SyntheticCorpus {
        chunks,
        train: all,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    fn small(hops: usize) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            m: 120,
            n_examples: 40,
            hops,
            ..SyntheticTaskSpec::default()
        }
    }

    #[test]
    fn deterministic_by_seed() {
        assert_eq!(generate(&small(2)).unwrap(), generate(&small(2)).unwrap());
        let other = SyntheticTaskSpec {
            seed: 1,
            ..small(2)
        };
        assert_ne!(generate(&small(2)).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn structure_holds() {
        for hops in [1, 2] {
            let spec = small(hops);
            let c = generate(&spec).unwrap();
            assert_eq!(c.chunks.len(), spec.m);
            assert_eq!(c.train.len() + c.eval.len(), spec.n_examples);
            assert_eq!(c.eval.len(), 12);
            let by_id: HashMap<u64, &Vec<u32>> = c
                .chunks
                .iter()
                .map(|ch| (ch.chunk_id, &ch.tokens))
                .collect();
            assert!(c.chunks.iter().all(|ch| ch.tokens.len() == spec.l_c));
            for ex in c.train.iter().chain(&c.eval) {
                assert_eq!(ex.oracle_chunk_ids.len(), hops);
                assert_eq!(ex.question.len(), hops * spec.key_tokens);
                let q: HashSet<u32> = ex.question.iter().copied().collect();
                for id in &ex.oracle_chunk_ids {
                    let shared = by_id[id]
                        .iter()
                        .filter(|t| q.contains(t))
                        .collect::<HashSet<_>>()
                        .len();
                    assert!(shared >= spec.key_tokens);
                }
                let last = by_id[ex.oracle_chunk_ids.last().unwrap()];
                assert!(last
                    .windows(ex.answer.len())
                    .any(|w| w == ex.answer.as_slice()));
                if hops == 2 {
                    let a: HashSet<u32> = by_id[&ex.oracle_chunk_ids[0]].iter().copied().collect();
                    let bridge = last
                        .iter()
                        .filter(|t| a.contains(t) && !q.contains(t))
                        .count();
                    assert!(bridge >= spec.bridge_tokens);
                }
            }
        }
    }

    #[test]
    fn infeasible_specs_are_explained() {
        let err = generate(&SyntheticTaskSpec { m: 50, ..small(2) }).unwrap_err();
        assert!(err.to_string().contains("do not fit"));
        let err = generate(&SyntheticTaskSpec { l_c: 4, ..small(2) }).unwrap_err();
        assert!(err.to_string().contains("oracle chunk needs"));
        assert!(generate(&SyntheticTaskSpec {
            hops: 3,
            ..small(2)
        })
        .is_err());
    }
}
