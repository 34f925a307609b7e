//! Run configuration: one TOML file, `--set` overrides, then dedicated flags.

use std::path::{Path, PathBuf};

use intra_core::qa::{ContextRule, QaConfig};
use intra_core::retrieval::InitialScoring;
use intra_core::synth::SyntheticTaskSpec;
use intra_core::trainer::TrainConfig;
use intra_core::{ModelConfig, WeightInit};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding every artifact not given an explicit path.
    pub dir: PathBuf,
    pub model: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub chunks: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("run"),
            model: None,
            pool: None,
            params: None,
            chunks: None,
            train: None,
            eval: None,
        }
    }
}

impl Paths {
    fn pick(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.dir.join(name))
    }

    pub fn model(&self) -> PathBuf {
        self.pick(&self.model, "model.bin")
    }

    pub fn pool(&self) -> PathBuf {
        self.pick(&self.pool, "pool.bin")
    }

    pub fn params(&self) -> PathBuf {
        self.pick(&self.params, "params.bin")
    }

    pub fn chunks(&self) -> PathBuf {
        self.pick(&self.chunks, "chunks.jsonl")
    }

    pub fn train(&self) -> PathBuf {
        self.pick(&self.train, "train.jsonl")
    }

    pub fn eval(&self) -> PathBuf {
        self.pick(&self.eval, "eval.jsonl")
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelInit {
    pub projection_std: f64,
    pub embedding_std: f64,
    pub norm_jitter: f64,
}

impl Default for ModelInit {
    fn default() -> Self {
        let w = WeightInit::default();
        Self {
            projection_std: w.projection_std,
            embedding_std: w.embedding_std,
            norm_jitter: w.norm_jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub n0: usize,
    pub n: usize,
    /// Retrieval tokens.
    pub r: usize,
    /// Pooled rows per chunk.
    pub l_p: usize,
    pub rho_std: f64,
    pub initial_scoring: InitialScoring,
    pub initial_only: bool,
    pub context_rule: ContextRule,
    pub max_answer_len: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        let qa = QaConfig::default();
        Self {
            n0: qa.n0,
            n: qa.n,
            r: 8,
            l_p: 3,
            rho_std: 0.02,
            initial_scoring: qa.initial_scoring,
            initial_only: qa.initial_only,
            context_rule: qa.context_rule,
            max_answer_len: qa.max_answer_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub axis: String,
    pub values: Vec<usize>,
    pub modes: Vec<String>,
    pub reps: usize,
    pub warmup: usize,
    pub l_g: usize,
    pub l_q: usize,
    pub l_c: usize,
    /// Pool size; the full-context mode re-encodes all of it per question.
    pub m: usize,
    /// Retrieved chunks on the chunk-length axis.
    pub k: usize,
    /// Worker threads for chunk scoring; 1 keeps timings single-threaded.
    pub threads: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            axis: "k".into(),
            values: vec![0, 4, 8, 16, 32, 48, 64],
            modes: vec!["rag".into(), "intra".into()],
            reps: 10,
            warmup: 3,
            l_g: 8,
            l_q: 8,
            l_c: 16,
            m: 64,
            k: 8,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every component seed is derived from it.
    pub seed: u64,
    pub paths: Paths,
    pub synth: SyntheticTaskSpec,
    pub model: ModelConfig,
    pub model_init: ModelInit,
    pub retrieval: RetrievalSection,
    pub train: TrainConfig,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            synth: SyntheticTaskSpec::default(),
            model: ModelConfig {
                max_positions: 4096,
                ..ModelConfig::default()
            },
            model_init: ModelInit::default(),
            retrieval: RetrievalSection::default(),
            train: TrainConfig::default(),
            bench: BenchSection::default(),
        }
    }
}

/// Seeds of the components, all derived from the root seed.
pub mod seeds {
    pub const CORPUS: u64 = 0;
    pub const WEIGHTS: u64 = 1;
    pub const PARAMS: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const RANDOM_CONTEXT: u64 = 4;
    pub const BENCH: u64 = 5;

    pub fn derive(root: u64, stream: u64) -> u64 {
        root.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream)
    }
}

impl RunConfig {
    /// Parse TOML text, apply `key.path=value` overrides, then validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut value: toml::Table =
            toml::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| {
                CliError::config(format!("cannot read config {}: {e}", p.display()))
            })?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.qa().validate()?;
        let r = &self.retrieval;
        if r.r == 0 || r.l_p == 0 {
            return Err(CliError::config(
                "retrieval.r and retrieval.l_p must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn weight_init(&self) -> WeightInit {
        WeightInit {
            seed: seeds::derive(self.seed, seeds::WEIGHTS),
            projection_std: self.model_init.projection_std,
            embedding_std: self.model_init.embedding_std,
            norm_jitter: self.model_init.norm_jitter,
        }
    }

    pub fn synth_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            seed: seeds::derive(self.seed, seeds::CORPUS),
            ..self.synth.clone()
        }
    }

    pub fn qa(&self) -> QaConfig {
        let r = &self.retrieval;
        QaConfig {
            n0: r.n0,
            n: r.n,
            max_answer_len: r.max_answer_len,
            context_rule: r.context_rule,
            initial_scoring: r.initial_scoring,
            initial_only: r.initial_only,
            random_seed: seeds::derive(self.seed, seeds::RANDOM_CONTEXT),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: seeds::derive(self.seed, seeds::TRAIN),
            n0: self.retrieval.n0,
            ..self.train.clone()
        }
    }

    pub fn params_seed(&self) -> u64 {
        seeds::derive(self.seed, seeds::PARAMS)
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!(
            "override key {key:?} is malformed"
        )));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, head) = parts.split_last().expect("nonempty key");
    let mut cur = table;
    for p in head {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            CliError::config(format!(
                "override key {key:?} passes through a non-table value"
            ))
        })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_beat_the_file() {
        let text = "seed = 3\n[retrieval]\nn0 = 4\n";
        let cfg =
            RunConfig::from_toml(text, &["retrieval.n0=0".into(), "paths.dir=out".into()]).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.retrieval.n0, 0);
        assert_eq!(cfg.paths.dir, PathBuf::from("out"));
        assert_eq!(cfg.paths.pool(), PathBuf::from("out/pool.bin"));
        let cfg =
            RunConfig::from_toml("", &["retrieval.initial_scoring=\"cosine\"".into()]).unwrap();
        assert_eq!(cfg.retrieval.initial_scoring, InitialScoring::Cosine);
    }

    #[test]
    fn bad_keys_are_config_errors() {
        let e = RunConfig::from_toml("[retrieval]\nnzero = 4\n", &[]).unwrap_err();
        assert_eq!(e.code(), 2);
        assert_eq!(
            RunConfig::from_toml("", &["seed".into()])
                .unwrap_err()
                .code(),
            2
        );
        assert_eq!(
            RunConfig::from_toml("", &["retrieval.r=0".into()])
                .unwrap_err()
                .code(),
            2
        );
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.weight_init().seed, cfg.params_seed());
        assert_eq!(cfg.train_config().n0, cfg.retrieval.n0);
    }
}
