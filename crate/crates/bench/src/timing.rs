//! Wall-clock time to first token and decode throughput on the toy model.

use std::path::Path;
use std::time::Instant;

use intra_core::data::Chunk;
use intra_core::io_util::write_atomic;
use intra_core::model::decoder::{argmax_lowest, CrossContext};
use intra_core::model::encoder::EncoderOutput;
use intra_core::model::SEP_TOKEN;
use intra_core::retrieval::{Engine, RetrievalParams};
use intra_core::store::ChunkPool;
use intra_core::{IntraError, Model, Result};
use serde::{Deserialize, Serialize};

use crate::cost::BenchMode;

pub const SWEEP_HEADER: &str =
    "mode,axis,value,ttft_ms_min,ttft_ms_median,ttft_ms_max,tps_median,reps";

/// A model, its stored pool and the raw chunk tokens in pool order.
#[derive(Clone, Copy)]
pub struct BenchSetup<'a> {
    pub model: &'a Model,
    pub pool: &'a ChunkPool,
    pub chunks: &'a [Chunk],
}

impl<'a> BenchSetup<'a> {
    pub fn new(model: &'a Model, pool: &'a ChunkPool, chunks: &'a [Chunk]) -> Result<Self> {
        if chunks.len() != pool.len()
            || chunks
                .iter()
                .zip(pool.ids())
                .any(|(c, &id)| c.chunk_id != id)
        {
            return Err(IntraError::InvalidArgument(
                "bench chunks must match the pool in length and order".into(),
            ));
        }
        Ok(Self {
            model,
            pool,
            chunks,
        })
    }

    /// Context states for `selection` obtained the way `mode` obtains them.
    ///
    /// Full and RAG encode raw tokens in one dense pass, whose attention cost is
    /// quadratic in the evidence length; INTRA reads the stored rows.
    pub fn context(&self, mode: BenchMode, selection: &[usize]) -> Result<CrossContext> {
        let indices: Vec<usize> = match mode {
            BenchMode::Full => (0..self.pool.len()).collect(),
            BenchMode::Rag | BenchMode::Intra => selection.to_vec(),
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.pool.len()) {
            return Err(IntraError::InvalidArgument(format!(
                "selection index {bad} outside the pool"
            )));
        }
        if indices.is_empty() {
            return Ok(self.model.empty_context());
        }
        let kbar = match mode {
            BenchMode::Intra => self.pool.context_rows(&indices),
            BenchMode::Full | BenchMode::Rag => {
                let segments: Vec<&[u32]> = indices
                    .iter()
                    .map(|&i| self.chunks[i].tokens.as_slice())
                    .collect();
                let states = self.model.encode_segments(&segments)?;
                let mut k = EncoderOutput { states }.normalized(self.model.config().rmsnorm_eps)?;
                k.round_to_f32();
                k
            }
        };
        self.model.prepare_context(kbar)
    }

    /// First greedy token after the question prompt.
    pub fn first_token(
        &self,
        mode: BenchMode,
        question: &[u32],
        selection: &[usize],
    ) -> Result<u32> {
        let ctx = self.context(mode, selection)?;
        let mut session = self.model.session(&ctx);
        Ok(argmax_lowest(&session.prefill(&prompt(question))?))
    }
}

fn prompt(question: &[u32]) -> Vec<u32> {
    let mut p = question.to_vec();
    p.push(SEP_TOKEN);
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureOptions {
    pub reps: usize,
    pub warmup: usize,
    /// Decode steps after the first token used for throughput.
    pub l_g: usize,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        Self {
            reps: 10,
            warmup: 3,
            l_g: 8,
        }
    }
}

impl MeasureOptions {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(IntraError::InvalidArgument(format!(
                "at least 3 repetitions are needed for dispersion, got {}",
                self.reps
            )));
        }
        if self.l_g == 0 {
            return Err(IntraError::InvalidArgument("l_g must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Dispersion {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(IntraError::EmptyInput("timing samples".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Ok(Self {
            min: v[0],
            median,
            max: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub mode: BenchMode,
    pub k: usize,
    pub l_c: usize,
    pub ttft_ms: Dispersion,
    pub tokens_per_second: Dispersion,
    pub repetitions: usize,
    pub first_token: u32,
}

/// Time to first token and decode throughput, with `opts.warmup` discarded runs.
///
/// The clock covers obtaining the context states and the prompt prefill; the
/// selection is given, so retrieval time is excluded.
pub fn measure(
    setup: &BenchSetup<'_>,
    mode: BenchMode,
    question: &[u32],
    selection: &[usize],
    opts: &MeasureOptions,
) -> Result<BenchResult> {
    opts.validate()?;
    let prompt = prompt(question);
    let mut samples = Samples::default();
    for rep in 0..opts.warmup + opts.reps {
        let s = run_once(setup, mode, &prompt, selection, opts.l_g)?;
        if rep >= opts.warmup {
            samples.push(s);
        }
    }
    samples.finish(setup, mode, selection, opts.reps)
}

#[derive(Default)]
struct Samples {
    ttft: Vec<f64>,
    tps: Vec<f64>,
    first: Option<u32>,
}

impl Samples {
    fn push(&mut self, (ttft, tps, first): (f64, f64, u32)) {
        self.ttft.push(ttft);
        self.tps.push(tps);
        self.first = Some(first);
    }

    fn finish(
        self,
        setup: &BenchSetup<'_>,
        mode: BenchMode,
        selection: &[usize],
        reps: usize,
    ) -> Result<BenchResult> {
        let (ttft, tps, first) = (self.ttft, self.tps, self.first);
        let l_c = selection
            .first()
            .map(|&i| setup.pool.chunk_len(i))
            .unwrap_or_else(|| setup.chunks.first().map_or(0, |c| c.tokens.len()));
        Ok(BenchResult {
            mode,
            k: selection.len(),
            l_c,
            ttft_ms: Dispersion::of(&ttft)?,
            tokens_per_second: Dispersion::of(&tps)?,
            repetitions: reps,
            first_token: first.unwrap_or_default(),
        })
    }
}

/// One timed run: TTFT in ms, decode tokens per second and the first token.
fn run_once(
    setup: &BenchSetup<'_>,
    mode: BenchMode,
    prompt: &[u32],
    selection: &[usize],
    l_g: usize,
) -> Result<(f64, f64, u32)> {
    let start = Instant::now();
    let ctx = setup.context(mode, selection)?;
    let mut session = setup.model.session(&ctx);
    let mut token = argmax_lowest(&session.prefill(prompt)?);
    let t_first = start.elapsed().as_secs_f64();
    let first_token = token;
    let start = Instant::now();
    for _ in 0..l_g {
        token = argmax_lowest(&session.step(token)?);
    }
    let t_gen = start.elapsed().as_secs_f64();
    std::hint::black_box(token);
    Ok((
        t_first * 1e3,
        l_g as f64 / t_gen.max(f64::MIN_POSITIVE),
        first_token,
    ))
}

pub fn measure_ttft(
    setup: &BenchSetup<'_>,
    mode: BenchMode,
    question: &[u32],
    selection: &[usize],
    reps: usize,
) -> Result<BenchResult> {
    measure(
        setup,
        mode,
        question,
        selection,
        &MeasureOptions {
            reps,
            l_g: 1,
            ..MeasureOptions::default()
        },
    )
}

pub fn measure_throughput(
    setup: &BenchSetup<'_>,
    mode: BenchMode,
    question: &[u32],
    selection: &[usize],
    l_g: usize,
    reps: usize,
) -> Result<BenchResult> {
    measure(
        setup,
        mode,
        question,
        selection,
        &MeasureOptions {
            reps,
            l_g,
            ..MeasureOptions::default()
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    #[serde(rename = "l_c")]
    ChunkLen,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::ChunkLen => "l_c",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepAxis::K),
            "l_c" | "Lc" | "lc" => Ok(SweepAxis::ChunkLen),
            other => Err(IntraError::InvalidArgument(format!(
                "unknown sweep axis {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: usize,
    pub result: BenchResult,
}

fn check_values(values: &[usize]) -> Result<()> {
    if values.is_empty() {
        return Err(IntraError::InvalidArgument("sweep values are empty".into()));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(IntraError::InvalidArgument(
            "sweep values must be strictly ascending".into(),
        ));
    }
    Ok(())
}

/// Sweep over the number of chunks taken from the head of `ranking`.
pub fn sweep_k(
    setup: &BenchSetup<'_>,
    question: &[u32],
    ranking: &[usize],
    values: &[usize],
    modes: &[BenchMode],
    opts: &MeasureOptions,
) -> Result<Vec<SweepRow>> {
    check_values(values)?;
    if let Some(&k) = values.iter().find(|&&k| k > ranking.len()) {
        return Err(IntraError::InvalidArgument(format!(
            "k = {k} exceeds the {} ranked chunks",
            ranking.len()
        )));
    }
    opts.validate()?;
    let prompt = prompt(question);
    // each rep visits every (mode, k) so slow host phases spread across the sweep
    let mut samples: Vec<Samples> = (0..modes.len() * values.len())
        .map(|_| Samples::default())
        .collect();
    for rep in 0..opts.warmup + opts.reps {
        for (i, &mode) in modes.iter().enumerate() {
            for (j, &k) in values.iter().enumerate() {
                let one = run_once(setup, mode, &prompt, &ranking[..k], opts.l_g)?;
                if rep >= opts.warmup {
                    samples[i * values.len() + j].push(one);
                }
            }
        }
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (n, s) in samples.into_iter().enumerate() {
        let (mode, k) = (modes[n / values.len()], values[n % values.len()]);
        rows.push(SweepRow {
            axis: SweepAxis::K,
            value: k,
            result: s.finish(setup, mode, &ranking[..k], opts.reps)?,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let t = &r.result.ttft_ms;
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.3},{}\n",
            r.result.mode,
            r.axis.name(),
            r.value,
            t.min,
            t.median,
            t.max,
            r.result.tokens_per_second.median,
            r.result.repetitions
        ));
    }
    out
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_atomic(path, sweep_csv(rows).as_bytes())
}

/// Wall time in ms of one full-corpus scoring pass: S0 selection, then INTRA
/// scores of every chunk. Runs on the current rayon pool.
pub fn measure_scoring(
    engine: &Engine<'_>,
    question: &[u32],
    params: &RetrievalParams,
    n0: usize,
    reps: usize,
    warmup: usize,
) -> Result<Dispersion> {
    if reps < 3 {
        return Err(IntraError::InvalidArgument(format!(
            "{reps} repetitions, need at least 3"
        )));
    }
    let mut times = Vec::with_capacity(reps);
    for rep in 0..warmup + reps {
        let start = Instant::now();
        let (_, s0) = engine.initial_selection(question, n0)?;
        std::hint::black_box(engine.intra_scores(question, params, &s0)?);
        if rep >= warmup {
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    Dispersion::of(&times)
}

/// Host facts recorded next to every sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostDescriptor {
    pub os: String,
    pub arch: String,
    pub threads: usize,
}

impl HostDescriptor {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Seeded random chunks and a question over the content vocabulary.
pub fn random_workload(
    m: usize,
    l_c: usize,
    l_q: usize,
    vocab_size: usize,
    seed: u64,
) -> (Vec<Chunk>, Vec<u32>) {
    use intra_core::model::FIRST_CONTENT_TOKEN;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let content = vocab_size
        .saturating_sub(FIRST_CONTENT_TOKEN as usize)
        .max(1);
    let mut token = || FIRST_CONTENT_TOKEN + rng.random_range(0..content) as u32;
    let chunks = (0..m as u64)
        .map(|chunk_id| Chunk {
            chunk_id,
            tokens: (0..l_c).map(|_| token()).collect(),
        })
        .collect();
    let question = (0..l_q).map(|_| token()).collect();
    (chunks, question)
}

/// Sweep over chunk length on fresh random pools holding `m` chunks, taking the first `k`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_chunk_len(
    model: &Model,
    values: &[usize],
    m: usize,
    k: usize,
    l_q: usize,
    seed: u64,
    modes: &[BenchMode],
    opts: &MeasureOptions,
) -> Result<Vec<SweepRow>> {
    check_values(values)?;
    if k > m {
        return Err(IntraError::InvalidArgument(format!(
            "k = {k} exceeds the pool size {m}"
        )));
    }
    let mut rows = Vec::with_capacity(values.len() * modes.len());
    for &l_c in values {
        let (chunks, question) = random_workload(m, l_c, l_q, model.config().vocab_size, seed);
        let pool = intra_core::store::build_pool(&chunks, model)?;
        let setup = BenchSetup::new(model, &pool, &chunks)?;
        let selection: Vec<usize> = (0..k).collect();
        for &mode in modes {
            let result = measure(&setup, mode, &question, &selection, opts)?;
            rows.push(SweepRow {
                axis: SweepAxis::ChunkLen,
                value: l_c,
                result,
            });
        }
    }
    Ok(rows)
}
