//! One function per subcommand; each wires files to a single library operation.

use std::path::{Path, PathBuf};

use intra_bench::{
    cost_model, measure_scoring, random_workload, sweep_chunk_len, sweep_k, write_sweep_csv,
    BenchMode, BenchSetup, Cost, CostParams, HostDescriptor, MeasureOptions, SweepAxis, SweepRow,
};
use intra_core::baselines::LexicalIndex;
use intra_core::data::{load_dataset, read_jsonl, write_jsonl, Chunk, QAExample};
use intra_core::io_util::write_atomic;
use intra_core::qa::{EvalReport, Mode, Pipeline};
use intra_core::retrieval::{Engine, RetrievalParams, ScoreRecord, Stage};
use intra_core::store::{
    build_pool, load_pool, pool_stats, save_pool, PoolStats, PooledIndex, Precision,
};
use intra_core::synth::generate;
use intra_core::trainer::{train, write_history_csv, TrainOutcome};
use intra_core::{Model, ModelWeights};
use serde::Serialize;

use crate::config::{seeds, RunConfig};
use crate::error::CliError;

pub type CliResult<T> = Result<T, CliError>;

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    Ok(write_atomic(path, text.as_bytes())?)
}

fn need(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::data(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusSummary {
    pub seed: u64,
    pub chunks: usize,
    pub train: usize,
    pub eval: usize,
}

pub fn gen_corpus(cfg: &RunConfig) -> CliResult<CorpusSummary> {
    let spec = cfg.synth_spec();
    let corpus = generate(&spec)?;
    let p = &cfg.paths;
    write_jsonl(&p.chunks(), &corpus.chunks)?;
    write_jsonl(&p.train(), &corpus.train)?;
    write_jsonl(&p.eval(), &corpus.eval)?;
    write_json(
        &p.artifact("corpus.json"),
        &serde_json::json!({ "root_seed": cfg.seed, "spec": spec }),
    )?;
    Ok(CorpusSummary {
        seed: cfg.seed,
        chunks: corpus.chunks.len(),
        train: corpus.train.len(),
        eval: corpus.eval.len(),
    })
}

/// The stored model, or a freshly initialized one saved to the model path.
pub fn load_or_init_model(cfg: &RunConfig) -> CliResult<Model> {
    let path = cfg.paths.model();
    if path.exists() {
        let (config, weights) = ModelWeights::load(&path)?;
        return Ok(Model::new(config, weights)?);
    }
    let model = Model::random(cfg.model.clone(), &cfg.weight_init())?;
    model.weights().save(model.config(), &path)?;
    Ok(model)
}

pub fn load_model(cfg: &RunConfig) -> CliResult<Model> {
    let path = cfg.paths.model();
    need(&path, "model")?;
    let (config, weights) = ModelWeights::load(&path)?;
    Ok(Model::new(config, weights)?)
}

pub fn encode_pool(cfg: &RunConfig, precision: Precision) -> CliResult<PoolStats> {
    let model = load_or_init_model(cfg)?;
    let chunks_path = cfg.paths.chunks();
    need(&chunks_path, "chunk file")?;
    let chunks: Vec<Chunk> = read_jsonl(&chunks_path)?;
    let pool = build_pool(&chunks, &model)?;
    let pooled = PooledIndex::build(&pool, cfg.retrieval.l_p)?;
    save_pool(&pool, &pooled, &cfg.paths.pool(), precision)?;
    Ok(pool_stats(&pool, model.config()))
}

/// Model, pool and a pooled index at the configured `L_p`.
pub struct Loaded {
    pub model: Model,
    pub pool: intra_core::store::ChunkPool,
    pub pooled: PooledIndex,
}

impl Loaded {
    pub fn open(cfg: &RunConfig) -> CliResult<Self> {
        let model = load_model(cfg)?;
        let path = cfg.paths.pool();
        need(&path, "pool")?;
        let loaded = load_pool(&path)?;
        let pooled = if loaded.pooled.l_p() == cfg.retrieval.l_p {
            loaded.pooled
        } else {
            PooledIndex::build(&loaded.pool, cfg.retrieval.l_p)?
        };
        Ok(Self {
            model,
            pool: loaded.pool,
            pooled,
        })
    }

    pub fn engine(&self) -> CliResult<Engine<'_>> {
        Ok(Engine::new(&self.model, &self.pool, &self.pooled)?)
    }

    pub fn dataset(&self, path: &Path) -> CliResult<Vec<QAExample>> {
        need(path, "dataset")?;
        let ids = self.pool.ids().iter().copied().collect();
        Ok(load_dataset(path, &ids)?)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub params_hash: String,
    pub weights_checksum: String,
}

/// Train `ρ` and `α` on prepared examples with the configured seeds.
pub fn train_on(
    cfg: &RunConfig,
    engine: &Engine<'_>,
    train_set: &[QAExample],
) -> CliResult<TrainOutcome> {
    let tcfg = cfg.train_config();
    let prepared = train_set
        .iter()
        .map(|ex| engine.prepare_example(ex, tcfg.n0))
        .collect::<intra_core::Result<Vec<_>>>()?;
    let init = RetrievalParams::init(
        engine.model.config(),
        cfg.retrieval.r,
        cfg.params_seed(),
        cfg.retrieval.rho_std,
    )?;
    Ok(train(engine, &prepared, &init, &tcfg)?)
}

pub fn train_retrieval(cfg: &RunConfig) -> CliResult<TrainSummary> {
    let loaded = Loaded::open(cfg)?;
    let engine = loaded.engine()?;
    let train_set = loaded.dataset(&cfg.paths.train())?;
    let before = loaded.model.weights().checksum();
    let outcome = train_on(cfg, &engine, &train_set)?;
    let after = loaded.model.weights().checksum();
    if before != after {
        return Err(CliError {
            kind: crate::error::ErrorKind::Internal,
            message: "model weights changed during retrieval training".into(),
        });
    }
    outcome.params.save(&cfg.paths.params())?;
    write_history_csv(&cfg.paths.artifact("history.csv"), &outcome.history)?;
    let h = &outcome.history;
    Ok(TrainSummary {
        steps: h.len(),
        initial_loss: h.first().map_or(f64::NAN, |r| r.loss),
        final_loss: h.last().map_or(f64::NAN, |r| r.loss),
        params_hash: outcome.params.hash(),
        weights_checksum: after,
    })
}

fn load_params(cfg: &RunConfig, model: &Model) -> CliResult<RetrievalParams> {
    let path = cfg.paths.params();
    need(&path, "retrieval parameters")?;
    let params = RetrievalParams::load(&path)?;
    params.check(model.config())?;
    if params.r() != cfg.retrieval.r {
        return Err(CliError::config(format!(
            "parameters hold {} retrieval tokens but retrieval.r is {}; retrain with the same R",
            params.r(),
            cfg.retrieval.r
        )));
    }
    Ok(params)
}

/// Retrieval records (initial and final stage) for every example of `dataset`.
pub fn retrieve(cfg: &RunConfig, dataset: &Path, out: &Path) -> CliResult<usize> {
    let loaded = Loaded::open(cfg)?;
    let engine = loaded.engine()?;
    let params = load_params(cfg, &loaded.model)?;
    let examples = loaded.dataset(dataset)?;
    let pipeline = Pipeline::new(engine, &params, cfg.qa())?;
    let hash = params.hash();
    let mut records = Vec::with_capacity(2 * examples.len());
    for ex in &examples {
        let r = pipeline.retrieve(&ex.question)?;
        records.push(ScoreRecord::new(
            ex.id,
            Stage::Initial,
            &r.s0,
            &loaded.pool,
            None,
        ));
        let stage = if r.intra.is_some() {
            Stage::Intra
        } else {
            Stage::Initial
        };
        let top = r.selection.prefix(cfg.retrieval.n);
        records.push(ScoreRecord::new(
            ex.id,
            stage,
            &top,
            &loaded.pool,
            Some(hash.clone()),
        ));
    }
    write_jsonl(out, &records)?;
    Ok(records.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnswerRecord {
    pub id: u64,
    pub context: Vec<u64>,
    pub answer: Vec<u32>,
}

pub fn answer(cfg: &RunConfig, questions: &[(u64, Vec<u32>)]) -> CliResult<Vec<AnswerRecord>> {
    let loaded = Loaded::open(cfg)?;
    let engine = loaded.engine()?;
    let params = load_params(cfg, &loaded.model)?;
    let pipeline = Pipeline::new(engine, &params, cfg.qa())?;
    questions
        .iter()
        .map(|(id, q)| {
            let r = pipeline.retrieve(q)?;
            let context = r.context(&pipeline.config);
            let answer = pipeline.generate(q, &context)?;
            Ok(AnswerRecord {
                id: *id,
                context: context.iter().map(|&i| loaded.pool.id(i)).collect(),
                answer,
            })
        })
        .collect()
}

pub fn parse_modes(list: &str) -> CliResult<Vec<Mode>> {
    let modes = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<Mode>())
        .collect::<intra_core::Result<Vec<_>>>()?;
    if modes.is_empty() {
        return Err(CliError::config("no evaluation modes given"));
    }
    Ok(modes)
}

pub fn eval(
    cfg: &RunConfig,
    dataset: &Path,
    modes: &[Mode],
    out_dir: &Path,
) -> CliResult<EvalReport> {
    let loaded = Loaded::open(cfg)?;
    let engine = loaded.engine()?;
    let params = load_params(cfg, &loaded.model)?;
    let examples = loaded.dataset(dataset)?;
    let chunks: Vec<Chunk> = read_jsonl(&cfg.paths.chunks())?;
    let lexical = lexical_index(&chunks, &loaded.pool)?;
    let pipeline = Pipeline::new(engine, &params, cfg.qa())?;
    let name = dataset
        .file_stem()
        .map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
    let report = pipeline.evaluate(&name, &examples, modes, &lexical)?;
    write_json(&out_dir.join("report.json"), &report)?;
    write_atomic(&out_dir.join("report.csv"), report.to_csv().as_bytes())?;
    Ok(report)
}

/// Lexical index over chunks reordered to match the pool.
pub fn lexical_index(
    chunks: &[Chunk],
    pool: &intra_core::store::ChunkPool,
) -> CliResult<LexicalIndex> {
    let by_id: std::collections::HashMap<u64, &Chunk> =
        chunks.iter().map(|c| (c.chunk_id, c)).collect();
    let ordered = pool
        .ids()
        .iter()
        .map(|id| {
            by_id.get(id).map(|c| (*c).clone()).ok_or_else(|| {
                CliError::data(format!(
                    "chunk {id} is in the pool but not in the chunk file"
                ))
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(LexicalIndex::build(&ordered))
}

pub fn parse_bench_modes(names: &[String]) -> CliResult<Vec<BenchMode>> {
    let modes = names
        .iter()
        .map(|s| s.parse::<BenchMode>())
        .collect::<intra_core::Result<Vec<_>>>()?;
    if modes.is_empty() {
        return Err(CliError::config("no bench modes given"));
    }
    Ok(modes)
}

/// Timing sweep on the configured model over a seeded random pool.
pub fn bench(cfg: &RunConfig, out: &Path) -> CliResult<Vec<SweepRow>> {
    let threads = cfg.bench.threads;
    if threads == 0 {
        return Err(CliError::config("bench.threads must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::internal(format!("thread pool: {e}")))?;
    pool.install(|| bench_on_pool(cfg, out))
}

fn bench_on_pool(cfg: &RunConfig, out: &Path) -> CliResult<Vec<SweepRow>> {
    let b = &cfg.bench;
    let axis = SweepAxis::parse(&b.axis)?;
    let modes = parse_bench_modes(&b.modes)?;
    let opts = MeasureOptions {
        reps: b.reps,
        warmup: b.warmup,
        l_g: b.l_g,
    };
    let model = Model::random(cfg.model.clone(), &cfg.weight_init())?;
    let seed = seeds::derive(cfg.seed, seeds::BENCH);
    let (chunks, question) = random_workload(b.m, b.l_c, b.l_q, model.config().vocab_size, seed);
    let pool = build_pool(&chunks, &model)?;
    let rows = match axis {
        SweepAxis::K => {
            let setup = BenchSetup::new(&model, &pool, &chunks)?;
            let ranking: Vec<usize> = (0..pool.len()).collect();
            sweep_k(&setup, &question, &ranking, &b.values, &modes, &opts)?
        }
        SweepAxis::ChunkLen => {
            sweep_chunk_len(&model, &b.values, b.m, b.k, b.l_q, seed, &modes, &opts)?
        }
    };
    let pooled = PooledIndex::build(&pool, cfg.retrieval.l_p)?;
    let engine = Engine::new(&model, &pool, &pooled)?;
    let params = RetrievalParams::init(
        model.config(),
        cfg.retrieval.r,
        cfg.params_seed(),
        cfg.retrieval.rho_std,
    )?;
    let scoring_ms = measure_scoring(
        &engine,
        &question,
        &params,
        cfg.retrieval.n0.min(pool.len()),
        b.reps,
        b.warmup,
    )?;
    write_sweep_csv(out, &rows)?;
    let sidecar: PathBuf = out.with_extension("json");
    write_json(
        &sidecar,
        &serde_json::json!({
            "root_seed": cfg.seed,
            "bench": b,
            "model": cfg.model,
            "host": HostDescriptor::current(),
            "scoring_threads": rayon::current_num_threads(),
            "scoring_ms": scoring_ms,
        }),
    )?;
    Ok(rows)
}

pub fn cost(params: &CostParams, mode: BenchMode) -> CliResult<Cost> {
    Ok(cost_model(params, mode)?)
}

pub fn pool_stats_cmd(cfg: &RunConfig) -> CliResult<PoolStats> {
    let model = load_model(cfg)?;
    let path = cfg.paths.pool();
    need(&path, "pool")?;
    let loaded = load_pool(&path)?;
    Ok(pool_stats(&loaded.pool, model.config()))
}
