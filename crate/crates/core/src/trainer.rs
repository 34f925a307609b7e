//! Training of the retrieval tokens and aggregation weights against the frozen model.
//!
//! The objective is a soft cross-entropy over all pool chunks that spreads the
//! target mass evenly over the oracle chunks. Gradients reach `α` linearly and
//! `ρ` through MaxSim (routed to each query row's best chunk row) and the decoder.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::QAExample;
use crate::error::{IntraError, Result};
use crate::io_util::write_atomic;
use crate::model::{CrossContext, ExposedQueries};
use crate::retrieval::maxsim::{maxsim_argmax, maxsim_routed};
use crate::retrieval::{Engine, RetrievalParams, SelectionSet};
use crate::store::ChunkPool;
use crate::tensor::{axpy, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Size of the initial context used during training.
    pub n0: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 3e-3,
            warmup: 20,
            batch_size: 16,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            n0: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(IntraError::Config("steps must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(IntraError::Config(format!(
                "learning rate {} is not usable",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(IntraError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// Pool indices of an example's oracle chunks, deduplicated and ascending.
pub fn oracle_indices(pool: &ChunkPool, oracle_ids: &[u64]) -> Result<Vec<usize>> {
    if oracle_ids.is_empty() {
        return Err(IntraError::EmptyInput("oracle set".into()));
    }
    let set: BTreeSet<usize> = oracle_ids
        .iter()
        .map(|&id| pool.index_of(id))
        .collect::<Result<_>>()?;
    Ok(set.into_iter().collect())
}

/// `−(1/|O|) Σ_{j∈O} log softmax(s)_j` and its gradient with respect to `s`.
pub fn retrieval_loss_and_grad(scores: &[f64], oracle: &[usize]) -> Result<(f64, Vec<f64>)> {
    if oracle.is_empty() {
        return Err(IntraError::EmptyInput("oracle set".into()));
    }
    if let Some(&j) = oracle.iter().find(|&&j| j >= scores.len()) {
        return Err(IntraError::InvalidArgument(format!(
            "oracle index {j} outside {} scores",
            scores.len()
        )));
    }
    let lse = crate::model::ops::logsumexp(scores);
    let w = 1.0 / oracle.len() as f64;
    let loss = oracle.iter().map(|&j| lse - scores[j]).sum::<f64>() * w;
    let mut grad: Vec<f64> = scores.iter().map(|&s| (s - lse).exp()).collect();
    for &j in oracle {
        grad[j] -= w;
    }
    Ok((loss, grad))
}

pub fn retrieval_loss(scores: &[f64], oracle: &[usize]) -> Result<f64> {
    Ok(retrieval_loss_and_grad(scores, oracle)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub rho: Matrix,
    pub alpha: Matrix,
    pub loss: f64,
}

/// An example with everything that does not depend on the trained parameters.
pub struct PreparedExample {
    pub question: Vec<u32>,
    pub oracle: Vec<usize>,
    pub s0: SelectionSet,
    ctx: CrossContext,
}

/// Chunk-row winners per `(layer, head, chunk, query row)`.
pub struct Routing {
    argmax: Vec<usize>,
}

impl<'a> Engine<'a> {
    pub fn prepare_example(&self, ex: &QAExample, n0: usize) -> Result<PreparedExample> {
        ex.validate()?;
        let oracle = oracle_indices(self.pool, &ex.oracle_chunk_ids)?;
        let (_, s0) = self.initial_selection(&ex.question, n0)?;
        let ctx = self.context_for(&s0.indices)?;
        Ok(PreparedExample {
            question: ex.question.clone(),
            oracle,
            s0,
            ctx,
        })
    }

    /// Per-`(ℓ, h, i)` MaxSim values, and the routing that produced them.
    fn maxsim_table(&self, q: &ExposedQueries) -> (Vec<f64>, Routing) {
        let (layers, heads, r, d) = (q.layers, q.heads, q.positions, q.d);
        let m = self.pool.len();
        let scale = self.scale();
        let per_chunk: Vec<(Vec<f64>, Vec<usize>)> = (0..m)
            .into_par_iter()
            .map(|i| {
                let rows = self.chunk_rows(i);
                let mut vals = Vec::with_capacity(layers * heads);
                let mut arg = vec![0; layers * heads * r];
                for l in 0..layers {
                    for h in 0..heads {
                        let k = l * heads + h;
                        vals.push(maxsim_argmax(
                            q.block(l, h),
                            rows,
                            d,
                            scale,
                            &mut arg[k * r..(k + 1) * r],
                        ));
                    }
                }
                (vals, arg)
            })
            .collect();
        let mut table = Vec::with_capacity(m * layers * heads);
        let mut argmax = Vec::with_capacity(m * layers * heads * r);
        for (v, a) in per_chunk {
            table.extend(v);
            argmax.extend(a);
        }
        (table, Routing { argmax })
    }

    fn routed_table(&self, q: &ExposedQueries, routing: &Routing) -> Vec<f64> {
        let (layers, heads, r, d) = (q.layers, q.heads, q.positions, q.d);
        let scale = self.scale();
        let mut table = Vec::with_capacity(self.pool.len() * layers * heads);
        for i in 0..self.pool.len() {
            let rows = self.chunk_rows(i);
            for k in 0..layers * heads {
                let base = (i * layers * heads + k) * r;
                table.push(maxsim_routed(
                    q.block(k / heads, k % heads),
                    rows,
                    d,
                    scale,
                    &routing.argmax[base..base + r],
                ));
            }
        }
        table
    }

    fn scores_from_table(&self, table: &[f64], alpha: &Matrix) -> Vec<f64> {
        let lh = alpha.rows() * alpha.cols();
        table
            .chunks_exact(lh)
            .map(|t| t.iter().zip(alpha.as_slice()).map(|(m, a)| a * m).sum())
            .collect()
    }

    /// Loss of one prepared example; with `routing` the MaxSim matching is held fixed.
    pub fn example_loss(
        &self,
        ex: &PreparedExample,
        params: &RetrievalParams,
        routing: Option<&Routing>,
    ) -> Result<f64> {
        let (input, positions) = self.retrieval_input(&ex.question, params)?;
        let q = match self.model.decoder_forward(
            &input,
            &ex.ctx,
            crate::model::ForwardMode::ExposeQueries(&positions),
        )? {
            crate::model::DecoderOutput::Queries(q) => q,
            crate::model::DecoderOutput::Logits(_) => unreachable!("expose mode returns queries"),
        };
        let table = match routing {
            Some(r) => self.routed_table(&q, r),
            None => self.maxsim_table(&q).0,
        };
        retrieval_loss(&self.scores_from_table(&table, &params.alpha), &ex.oracle)
    }

    /// Loss and reverse-mode gradients for `ρ` and `α`, plus the routing used.
    pub fn example_grad(
        &self,
        ex: &PreparedExample,
        params: &RetrievalParams,
    ) -> Result<(GradReport, Routing)> {
        let cfg = self.model.config();
        let (input, positions) = self.retrieval_input(&ex.question, params)?;
        let (q, tape) = self
            .model
            .expose_queries_recorded(&input, &ex.ctx, &positions)?;
        let (table, routing) = self.maxsim_table(&q);
        let scores = self.scores_from_table(&table, &params.alpha);
        let (loss, g_s) = retrieval_loss_and_grad(&scores, &ex.oracle)?;
        if !loss.is_finite() {
            return Err(IntraError::NonFinite("retrieval loss".into()));
        }

        let (layers, heads, r, d) = (q.layers, q.heads, q.positions, q.d);
        let lh = layers * heads;
        let mut g_alpha = Matrix::zeros(layers, heads);
        for (i, &gs) in g_s.iter().enumerate() {
            for k in 0..lh {
                g_alpha.as_mut_slice()[k] += gs * table[i * lh + k];
            }
        }

        let scale = self.scale();
        let mut g_q = ExposedQueries::zeros(layers, heads, r, d);
        for (i, &gs) in g_s.iter().enumerate() {
            let rows = self.chunk_rows(i);
            for k in 0..lh {
                let a = params.alpha.as_slice()[k];
                let c = gs * a * scale;
                if c == 0.0 {
                    continue;
                }
                let base = (i * lh + k) * r;
                let block = g_q.block_mut(k / heads, k % heads);
                for p in 0..r {
                    let b = routing.argmax[base + p];
                    axpy(c, &rows[b * d..(b + 1) * d], &mut block[p * d..(p + 1) * d]);
                }
            }
        }
        let g_input = self.model.queries_backward(&tape, &ex.ctx, &g_q)?;
        let lq = ex.question.len();
        let idx: Vec<usize> = (lq..lq + params.r()).collect();
        let g_rho = g_input.select_rows(&idx);
        if !g_rho.is_finite() || !g_alpha.is_finite() {
            return Err(IntraError::NonFiniteGradient("retrieval parameters".into()));
        }
        debug_assert_eq!(g_rho.cols(), cfg.d);
        Ok((
            GradReport {
                rho: g_rho,
                alpha: g_alpha,
                loss,
            },
            routing,
        ))
    }

    /// Mean loss and gradients over a batch; the reduction runs in batch order.
    pub fn batch_grad(
        &self,
        batch: &[&PreparedExample],
        params: &RetrievalParams,
    ) -> Result<GradReport> {
        let parts: Vec<GradReport> = batch
            .par_iter()
            .map(|ex| self.example_grad(ex, params).map(|(g, _)| g))
            .collect::<Result<_>>()?;
        let n = parts.len() as f64;
        let mut total = GradReport {
            rho: Matrix::zeros(params.rho.rows(), params.rho.cols()),
            alpha: Matrix::zeros(params.alpha.rows(), params.alpha.cols()),
            loss: 0.0,
        };
        for p in &parts {
            total.rho.add_assign(&p.rho);
            total.alpha.add_assign(&p.alpha);
            total.loss += p.loss;
        }
        total.rho.scale(1.0 / n);
        total.alpha.scale(1.0 / n);
        total.loss /= n;
        Ok(total)
    }

    pub fn mean_loss(&self, examples: &[PreparedExample], params: &RetrievalParams) -> Result<f64> {
        let losses: Vec<f64> = examples
            .par_iter()
            .map(|ex| self.example_loss(ex, params, None))
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }
}

/// Maximum relative error of central differences against an analytic gradient
/// over the given coordinates. The denominator is floored at `floor`.
pub fn finite_diff_max_rel<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    grad: &[f64],
    coords: &[usize],
    eps: f64,
    floor: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for &c in coords {
        probe[c] = x[c] + eps;
        let up = f(&probe);
        probe[c] = x[c] - eps;
        let down = f(&probe);
        probe[c] = x[c];
        let fd = (up - down) / (2.0 * eps);
        let denom = fd.abs().max(grad[c].abs()).max(floor);
        worst = worst.max((fd - grad[c]).abs() / denom);
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub alpha_max_rel: f64,
    pub rho_max_rel: f64,
    pub rho_coords: Vec<usize>,
}

/// Compare reverse-mode gradients with central differences on every `α`
/// coordinate and on `n_rho` sampled `ρ` coordinates, routing held fixed.
pub fn finite_diff_check(
    engine: &Engine<'_>,
    ex: &PreparedExample,
    params: &RetrievalParams,
    eps_alpha: f64,
    eps_rho: f64,
    n_rho: usize,
    seed: u64,
) -> Result<FdReport> {
    let (grad, routing) = engine.example_grad(ex, params)?;
    let alpha_coords: Vec<usize> = (0..params.alpha.as_slice().len()).collect();
    let mut failure = None;
    let alpha_max_rel = finite_diff_max_rel(
        |a| {
            let mut p = params.clone();
            p.alpha.as_mut_slice().copy_from_slice(a);
            engine
                .example_loss(ex, &p, Some(&routing))
                .unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
        },
        params.alpha.as_slice(),
        grad.alpha.as_slice(),
        &alpha_coords,
        eps_alpha,
        1e-12,
    );
    let n = params.rho.as_slice().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho_coords = rand::seq::index::sample(&mut rng, n, n_rho.min(n)).into_vec();
    let rho_max_rel = finite_diff_max_rel(
        |r| {
            let mut p = params.clone();
            p.rho.as_mut_slice().copy_from_slice(r);
            engine
                .example_loss(ex, &p, Some(&routing))
                .unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
        },
        params.rho.as_slice(),
        grad.rho.as_slice(),
        &rho_coords,
        eps_rho,
        1e-12,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(FdReport {
        alpha_max_rel,
        rho_max_rel,
        rho_coords,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub params: RetrievalParams,
    pub history: Vec<HistoryRow>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t);
        let b2t = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            theta[i] -= lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + cfg.weight_decay * theta[i]);
        }
    }
}

/// Deterministic mini-batch training of `ρ` and `α`.
///
/// Examples are reshuffled every pass with a seeded generator; the recorded loss
/// of a step is the batch mean before its update.
pub fn train(
    engine: &Engine<'_>,
    examples: &[PreparedExample],
    init: &RetrievalParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(IntraError::EmptyInput("training set".into()));
    }
    init.check(engine.model.config())?;
    let mut params = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut opt_rho = Adam::new(params.rho.as_slice().len());
    let mut opt_alpha = Adam::new(params.alpha.as_slice().len());
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(examples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let g = engine.batch_grad(&batch, &params)?;
        if !g.loss.is_finite() {
            return Err(IntraError::Diverged { step, loss: g.loss });
        }
        let lr = cfg.lr_at(step);
        opt_rho.step(params.rho.as_mut_slice(), g.rho.as_slice(), lr, cfg);
        opt_alpha.step(params.alpha.as_mut_slice(), g.alpha.as_slice(), lr, cfg);
        if !params.rho.is_finite() || !params.alpha.is_finite() {
            return Err(IntraError::Diverged { step, loss: g.loss });
        }
        history.push(HistoryRow {
            step,
            loss: g.loss,
            lr,
        });
    }
    Ok(TrainOutcome { params, history })
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for h in history {
        out.push_str(&format!("{},{},{}\n", h.step, h.loss, h.lr));
    }
    out
}

pub fn write_history_csv(path: &Path, history: &[HistoryRow]) -> Result<()> {
    write_atomic(path, history_csv(history).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let l = retrieval_loss(&[0.3; 4], &[0, 1]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let l = retrieval_loss(&[10.0, 0.0, 0.0], &[0]).unwrap();
        assert!((l - (1.0 + 2.0 * (-10f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 9.0795e-5).abs() < 1e-8);
        let s = [0.5, -1.0, 2.0];
        let lse = crate::model::ops::logsumexp(&s);
        let expect = s.iter().map(|v| lse - v).sum::<f64>() / 3.0;
        assert!((retrieval_loss(&s, &[0, 1, 2]).unwrap() - expect).abs() < 1e-15);
        assert!(retrieval_loss(&s, &[]).is_err());
        assert!(retrieval_loss(&s, &[3]).is_err());
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let s = [0.2, -0.4, 1.1, 0.0];
        let (_, g) = retrieval_loss_and_grad(&s, &[1, 2]).unwrap();
        let err = finite_diff_max_rel(
            |x| retrieval_loss(x, &[1, 2]).unwrap(),
            &s,
            &g,
            &[0, 1, 2, 3],
            1e-5,
            1e-12,
        );
        assert!(err < 1e-8);
    }

    #[test]
    fn quadratic_stub_is_exact() {
        let x = [0.3, -1.2, 2.5];
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = finite_diff_max_rel(
            |a| a.iter().map(|v| v * v).sum(),
            &x,
            &g,
            &[0, 1, 2],
            1e-4,
            1e-12,
        );
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup: 4,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|s| cfg.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn csv_format() {
        let h = [HistoryRow {
            step: 0,
            loss: 1.5,
            lr: 0.001,
        }];
        assert_eq!(history_csv(&h), "step,loss,lr\n0,1.5,0.001\n");
    }
}
