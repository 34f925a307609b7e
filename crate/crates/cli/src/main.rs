use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use intra_bench::{BenchMode, CostParams};
use intra_cli::commands::{self, CliResult};
use intra_cli::{CliError, RunConfig};
use intra_core::qa::ContextRule;
use intra_core::retrieval::InitialScoring;
use intra_core::store::Precision;

#[derive(Parser)]
#[command(
    name = "intra",
    version,
    about = "Retrieval and answering over a pre-encoded chunk pool"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set retrieval.n0=0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true)]
    dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// Retrieval settings and ablation switches.
#[derive(Args, Default)]
struct RetrievalFlags {
    /// Initial selection size; 0 runs without an initial context.
    #[arg(long)]
    n0: Option<usize>,
    /// Final selection size.
    #[arg(long)]
    n: Option<usize>,
    /// Retrieval tokens.
    #[arg(long)]
    r: Option<usize>,
    /// Pooled rows per chunk.
    #[arg(long)]
    lp: Option<usize>,
    /// Use the initial selection as the final selection.
    #[arg(long)]
    initial_only: bool,
    /// Score the initial selection by mean-vector cosine instead of MaxSim.
    #[arg(long)]
    cosine_s0: bool,
    /// Take the whole context from the final selection.
    #[arg(long)]
    top5_context: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic chunk file and train/eval datasets.
    GenCorpus {
        #[arg(long)]
        hops: Option<usize>,
    },
    /// Encode every chunk once and store the normalized rows.
    EncodePool {
        /// f32 or int8.
        #[arg(long, default_value = "f32")]
        precision: String,
        #[arg(long)]
        lp: Option<usize>,
    },
    /// Train the retrieval tokens and layer-head weights.
    TrainRetrieval {
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        flags: RetrievalFlags,
    },
    /// Write initial and final selections as JSON lines.
    Retrieve {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: RetrievalFlags,
    },
    /// Answer one question (comma-separated token ids) or every question of a dataset.
    Answer {
        #[arg(long, conflicts_with = "dataset")]
        question: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: RetrievalFlags,
    },
    /// Evaluate retrieval and generation modes on a dataset.
    Eval {
        /// Comma-separated modes, e.g. initial,rerank,intra,random,complete,bm25.
        #[arg(long, default_value = "initial,rerank,intra,random,complete")]
        modes: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        flags: RetrievalFlags,
    },
    /// Time-to-first-token sweep written as CSV with a JSON sidecar.
    Bench {
        /// k or l_c.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated ascending values.
        #[arg(long)]
        values: Option<String>,
        /// Comma-separated modes out of full, rag, intra.
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        /// Worker threads for chunk scoring, timed separately in the JSON sidecar.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the analytic per-phase cost.
    CostModel {
        #[arg(long)]
        mode: String,
        #[arg(long = "Lq")]
        l_q: u64,
        #[arg(long)]
        k: u64,
        #[arg(long = "Lc")]
        l_c: u64,
        #[arg(long = "M", default_value_t = 1)]
        m: u64,
        #[arg(long = "Lg", default_value_t = 1)]
        l_g: u64,
    },
    /// Storage figures of the stored pool.
    PoolStats,
}

fn apply_flags(cfg: &mut RunConfig, f: &RetrievalFlags) {
    let r = &mut cfg.retrieval;
    if let Some(v) = f.n0 {
        r.n0 = v;
    }
    if let Some(v) = f.n {
        r.n = v;
    }
    if let Some(v) = f.r {
        r.r = v;
    }
    if let Some(v) = f.lp {
        r.l_p = v;
    }
    if f.initial_only {
        r.initial_only = true;
    }
    if f.cosine_s0 {
        r.initial_scoring = InitialScoring::Cosine;
    }
    if f.top5_context {
        r.context_rule = ContextRule::TopFive;
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CliError::config(format!("{what}: {t:?} is not a valid entry")))
        })
        .collect()
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.dir {
        cfg.paths.dir = dir;
    }
    match cli.command {
        Command::GenCorpus { hops } => {
            if let Some(h) = hops {
                cfg.synth.hops = h;
            }
            print_json(&commands::gen_corpus(&cfg)?);
        }
        Command::EncodePool { precision, lp } => {
            if let Some(v) = lp {
                cfg.retrieval.l_p = v;
            }
            cfg.validate()?;
            print_json(&commands::encode_pool(&cfg, Precision::parse(&precision)?)?);
        }
        Command::TrainRetrieval { steps, flags } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            apply_flags(&mut cfg, &flags);
            cfg.validate()?;
            print_json(&commands::train_retrieval(&cfg)?);
        }
        Command::Retrieve {
            dataset,
            out,
            flags,
        } => {
            apply_flags(&mut cfg, &flags);
            cfg.validate()?;
            let dataset = dataset.unwrap_or_else(|| cfg.paths.eval());
            let out = out.unwrap_or_else(|| cfg.paths.artifact("retrieval.jsonl"));
            let n = commands::retrieve(&cfg, &dataset, &out)?;
            eprintln!("wrote {n} records to {}", out.display());
        }
        Command::Answer {
            question,
            dataset,
            out,
            flags,
        } => {
            apply_flags(&mut cfg, &flags);
            cfg.validate()?;
            let questions: Vec<(u64, Vec<u32>)> = match (question, dataset) {
                (Some(q), _) => vec![(0, parse_list(&q, "question")?)],
                (None, Some(path)) => {
                    intra_core::data::read_jsonl::<intra_core::data::QAExample>(&path)?
                        .into_iter()
                        .map(|ex| (ex.id, ex.question))
                        .collect()
                }
                (None, None) => {
                    return Err(CliError::config("answer needs --question or --dataset"))
                }
            };
            let answers = commands::answer(&cfg, &questions)?;
            match out {
                Some(path) => intra_core::data::write_jsonl(&path, &answers)?,
                None => {
                    for a in &answers {
                        println!("{}", serde_json::to_string(a).expect("serializable"));
                    }
                }
            }
        }
        Command::Eval {
            modes,
            dataset,
            out_dir,
            flags,
        } => {
            apply_flags(&mut cfg, &flags);
            cfg.validate()?;
            let modes = commands::parse_modes(&modes)?;
            let dataset = dataset.unwrap_or_else(|| cfg.paths.eval());
            let out_dir = out_dir.unwrap_or_else(|| cfg.paths.dir.clone());
            let report = commands::eval(&cfg, &dataset, &modes, &out_dir)?;
            print!("{}", report.to_csv());
        }
        Command::Bench {
            axis,
            values,
            modes,
            reps,
            threads,
            out,
        } => {
            let b = &mut cfg.bench;
            if let Some(a) = axis {
                b.axis = a;
            }
            if let Some(v) = values {
                b.values = parse_list(&v, "values")?;
            }
            if let Some(m) = modes {
                b.modes = parse_list(&m, "modes")?;
            }
            if let Some(r) = reps {
                b.reps = r;
            }
            if let Some(t) = threads {
                b.threads = t;
            }
            let out = out.unwrap_or_else(|| cfg.paths.artifact("bench.csv"));
            let rows = commands::bench(&cfg, &out)?;
            eprintln!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::CostModel {
            mode,
            l_q,
            k,
            l_c,
            m,
            l_g,
        } => {
            let mode: BenchMode = mode.parse()?;
            let c = commands::cost(
                &CostParams {
                    m,
                    l_c,
                    l_q,
                    k,
                    l_g,
                },
                mode,
            )?;
            println!(
                "pre_query={} retrieval={} prefill={} generation={}",
                c.pre_query, c.retrieval, c.prefill, c.generation
            );
        }
        Command::PoolStats => print_json(&commands::pool_stats_cmd(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code())
        }
    }
}
