mod backend;
mod io;

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use searchloop_core::api::{CompareRequest, CompareSide, EvaluateRequest, RolloutRequest, SelectRequest, SftRequest};
use searchloop_core::corpus::{ingest_jsonl, PassageStore, DEFAULT_PASSAGE_WORDS};
use searchloop_core::evaluation::{self, convert_record, EvalReport, PairedReport};
use searchloop_core::llm::{ChatModel, ENV_ENDPOINT};
use searchloop_core::protocol::{QueryMode, DEFAULT_WORD_CAP_PER_QUERY};
use searchloop_core::retriever::{Bm25Params, Index, RemoteRetriever, RemoteRetrieverConfig, SearchHit};
use searchloop_core::rollout::{
    BatchOutcome, FrozenClock, RolloutConfig, RolloutTrace, Termination, DEFAULT_MAX_NEW_TOKENS,
    DEFAULT_MAX_RETRIEVALS, DEFAULT_TEMPERATURE,
};
use searchloop_core::supervision::{self, mix_datasets, segment_sft, SelectionConfig, SelectionOutcome, SftGeneration};
use searchloop_server::AppState;

use backend::{Backend, BackendArgs};

#[derive(Parser)]
#[command(name = "searchloop", version, about = "Retrieval-augmented reasoning rollouts, supervision data and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split documents into titled fixed-size passages.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PASSAGE_WORDS)]
        passage_words: usize,
    },
    /// Build a BM25 index over a passage store.
    Index {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1.2)]
        k1: f64,
        #[arg(long, default_value_t = 0.75)]
        b: f64,
    },
    /// Top-k passages for one query.
    Search {
        #[arg(long, conflicts_with = "server")]
        index: Option<PathBuf>,
        #[arg(long)]
        server: Option<String>,
        #[arg(long)]
        query: String,
        #[arg(short, default_value_t = 3)]
        k: usize,
        /// Print hits as JSON lines.
        #[arg(long)]
        json: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, conflicts_with = "retriever_url")]
        index: Option<PathBuf>,
        #[arg(long)]
        retriever_url: Option<String>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        frozen_clock: bool,
    },
    /// Run episodes and write one trace per line.
    Rollout {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        rollout: RolloutArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Evaluate a benchmark file: EM, mean time, mean retrieval count.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Per-example rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Dataset name in the report; defaults to the file stem.
        #[arg(long)]
        name: Option<String>,
        #[command(flatten)]
        rollout: RolloutArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Evaluate two setups on one dataset; deltas are A minus B.
    Compare {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, value_enum, default_value_t = Mode::Single)]
        mode_a: Mode,
        #[arg(long, value_enum, default_value_t = Mode::Multi)]
        mode_b: Mode,
        /// Scripts for setup A; defaults to --script.
        #[arg(long)]
        script_a: Option<PathBuf>,
        /// Scripts for setup B; defaults to --script.
        #[arg(long)]
        script_b: Option<PathBuf>,
        #[command(flatten)]
        rollout: RolloutArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Teacher rollouts over a labelled dataset, segmented into SFT samples.
    SftGen {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        traces_out: Option<PathBuf>,
        /// Correctly answered questions (input to `mix`).
        #[arg(long)]
        correct_out: Option<PathBuf>,
        /// Missed questions (input to `rl-select`).
        #[arg(long)]
        incorrect_out: Option<PathBuf>,
        #[command(flatten)]
        rollout: RolloutArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Cut answered traces into SFT samples.
    Segment {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss masks (byte spans of injected information) for traces.
    Mask {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep questions a sampling teacher answers correctly at least once.
    RlSelect {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        reports: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        rollouts: u32,
        #[arg(long, default_value_t = 1.2)]
        temperature: f64,
        #[arg(long, default_value_t = 10)]
        max_retrievals: usize,
        #[arg(long, value_enum, default_value_t = Mode::Single)]
        mode: Mode,
        #[arg(short, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// All hard items plus a seeded fraction of correct items, shuffled.
    Mix {
        #[arg(long)]
        hard: PathBuf,
        #[arg(long)]
        correct: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert benchmark dumps with common field spellings to
    /// `{id, question, golden_answers}` lines.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Skip records that cannot be converted instead of failing.
        #[arg(long)]
        skip_invalid: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Single,
    Multi,
}

#[derive(Debug, Args, Clone)]
struct RolloutArgs {
    #[arg(long, value_enum, default_value_t = Mode::Single)]
    mode: Mode,
    /// Queries allowed per search in multi mode.
    #[arg(long, default_value_t = QueryMode::DEFAULT_MAX_PARALLEL_QUERIES)]
    max_parallel_queries: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_RETRIEVALS)]
    max_retrievals: usize,
    #[arg(short, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_MAX_NEW_TOKENS)]
    max_new_tokens: usize,
    #[arg(long, default_value_t = DEFAULT_WORD_CAP_PER_QUERY)]
    word_cap: usize,
}

impl RolloutArgs {
    fn config(&self, mode: Mode) -> Result<RolloutConfig> {
        let cfg = RolloutConfig {
            mode: query_mode(mode, self.max_parallel_queries),
            k: self.k,
            max_retrievals: self.max_retrievals,
            max_new_tokens_per_round: self.max_new_tokens,
            temperature: self.temperature,
            seed: self.seed,
            word_cap_per_query: self.word_cap,
        };
        cfg.validate().map_err(anyhow::Error::msg)?;
        Ok(cfg)
    }
}

fn query_mode(mode: Mode, cap: usize) -> QueryMode {
    match mode {
        Mode::Single => QueryMode::Single,
        Mode::Multi => QueryMode::Multi { max_parallel_queries: cap },
    }
}

fn dataset_name(name: &Option<String>, path: &Path) -> String {
    name.clone()
        .unwrap_or_else(|| path.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned()))
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "searchloop=info,warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    run(Cli::parse().command).await
}

async fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { input, output, passage_words } => {
            let (store, tally) = ingest_jsonl(io::open(&input)?, passage_words)?;
            for warning in &tally.warnings {
                tracing::warn!("{warning}");
            }
            store.save(&output)?;
            eprintln!(
                "ingested {} documents into {} passages ({} skipped)",
                tally.documents,
                store.len(),
                tally.skipped
            );
        }
        Command::Index { store, output, k1, b } => {
            let store = PassageStore::load(&store).with_context(|| format!("cannot load {}", store.display()))?;
            let index = Index::build(&store, Bm25Params { k1, b })?;
            index.save(&output)?;
            eprintln!("indexed {} passages", index.len());
        }
        Command::Search { index, server, query, k, json } => {
            let hits = match (index, server) {
                (_, Some(url)) => searchloop_client::Client::new(&url)?.search(&query, k).await?,
                (Some(path), None) => Index::load(&path)?.search(&query, k)?,
                (None, None) => bail!("pass --index or --server"),
            };
            print_hits(&hits, json)?;
        }
        Command::Serve { index, retriever_url, addr, frozen_clock } => serve(index, retriever_url, addr, frozen_clock).await?,
        Command::Rollout { questions, out, rollout, backend } => {
            let questions = io::read_questions(&questions)?;
            let cfg = rollout.config(rollout.mode)?;
            let outcome = match backend.backend()? {
                Backend::Local(engine) => engine.run_batch(&questions, &cfg, backend.parallelism).await,
                Backend::Remote { client, scripts } => {
                    client
                        .rollout(&RolloutRequest { questions, config: cfg, scripts, parallelism: backend.parallelism })
                        .await?
                }
            };
            summarize_batch(&outcome);
            io::write_jsonl(&out, &outcome.traces)?;
        }
        Command::Eval { dataset, report, csv, name, rollout, backend } => {
            let name = dataset_name(&name, &dataset);
            let examples = io::read_qa(&dataset)?;
            let cfg = rollout.config(rollout.mode)?;
            let result = match backend.backend()? {
                Backend::Local(engine) => {
                    evaluation::evaluate(&engine, &name, &examples, &cfg, backend.parallelism).await?
                }
                Backend::Remote { client, scripts } => {
                    client
                        .evaluate(&EvaluateRequest {
                            dataset_name: name,
                            dataset: examples,
                            config: cfg,
                            scripts,
                            parallelism: backend.parallelism,
                        })
                        .await?
                }
            };
            eprintln!(
                "{} ({}): n={} EM={:.4} avg_time={:.3}s avg_retrievals={:.3}",
                result.dataset_name, result.mode, result.n, result.em, result.avg_time, result.avg_retrieval_count
            );
            io::write_json(&report, &result)?;
            if let Some(path) = csv {
                write_rows_csv(&path, &result)?;
            }
        }
        Command::Compare { dataset, report, csv, name, mode_a, mode_b, script_a, script_b, rollout, backend } => {
            let name = dataset_name(&name, &dataset);
            let examples = io::read_qa(&dataset)?;
            let side = |path: &Option<PathBuf>, mode: Mode| -> Result<CompareSide> {
                let scripts = match path {
                    Some(p) => Some(io::read_json(p)?),
                    None => backend.scripts()?,
                };
                Ok(CompareSide { config: rollout.config(mode)?, scripts })
            };
            let (a, b) = (side(&script_a, mode_a)?, side(&script_b, mode_b)?);
            let paired = match &backend.server {
                Some(url) => {
                    searchloop_client::Client::new(url)?
                        .compare(&CompareRequest { dataset_name: name, dataset: examples, a, b, parallelism: backend.parallelism })
                        .await?
                }
                None => {
                    let engine_a = backend.engine_with(a.scripts)?;
                    let engine_b = backend.engine_with(b.scripts)?;
                    evaluation::compare_modes(
                        &name,
                        &examples,
                        (&engine_a, &a.config),
                        (&engine_b, &b.config),
                        backend.parallelism,
                    )
                    .await?
                }
            };
            eprintln!(
                "{} vs {}: ΔEM={:+.4} Δavg_time={:+.3}s Δavg_retrievals={:+.3}",
                paired.a.mode, paired.b.mode, paired.delta_em, paired.delta_avg_time, paired.delta_avg_retrieval_count
            );
            io::write_json(&report, &paired)?;
            if let Some(path) = csv {
                write_paired_csv(&path, &paired)?;
            }
        }
        Command::SftGen { dataset, out, traces_out, correct_out, incorrect_out, rollout, backend } => {
            let examples = io::read_qa(&dataset)?;
            let cfg = rollout.config(rollout.mode)?;
            let generation: SftGeneration = match backend.backend()? {
                Backend::Local(engine) => supervision::generate_sft(&engine, &examples, &cfg, backend.parallelism).await,
                Backend::Remote { client, scripts } => {
                    client
                        .sft(&SftRequest { dataset: examples, config: cfg, scripts, parallelism: backend.parallelism })
                        .await?
                }
            };
            eprintln!(
                "{} samples from {} correct questions ({} incorrect)",
                generation.samples.len(),
                generation.correct.len(),
                generation.incorrect.len()
            );
            io::write_jsonl(&out, &generation.samples)?;
            if let Some(path) = traces_out {
                io::write_jsonl(&path, &generation.traces)?;
            }
            if let Some(path) = correct_out {
                io::write_jsonl(&path, &generation.correct)?;
            }
            if let Some(path) = incorrect_out {
                io::write_jsonl(&path, &generation.incorrect)?;
            }
        }
        Command::Segment { traces, out } => {
            let traces: Vec<RolloutTrace> = io::read_jsonl(&traces)?;
            let mut samples = Vec::new();
            let mut skipped = 0;
            for trace in &traces {
                match segment_sft(trace) {
                    Ok(s) => samples.extend(s),
                    Err(e) => {
                        skipped += 1;
                        tracing::warn!("{e}");
                    }
                }
            }
            io::write_jsonl(&out, &samples)?;
            eprintln!("{} samples from {} traces ({skipped} skipped)", samples.len(), traces.len() - skipped);
        }
        Command::Mask { traces, out } => {
            let traces: Vec<RolloutTrace> = io::read_jsonl(&traces)?;
            let mut rows = Vec::with_capacity(traces.len());
            for trace in &traces {
                let mask = supervision::compute_loss_mask(trace)?;
                rows.push(serde_json::json!({ "id": trace.id, "spans": mask.spans, "masked_len": mask.masked_len() }));
            }
            io::write_jsonl(&out, &rows)?;
        }
        Command::RlSelect { dataset, out, reports, rollouts, temperature, max_retrievals, mode, k, seed, backend } => {
            if rollouts == 0 {
                bail!("--rollouts must be at least 1");
            }
            let examples = io::read_qa(&dataset)?;
            let cfg = SelectionConfig {
                rollouts,
                temperature,
                max_retrievals,
                mode: query_mode(mode, QueryMode::DEFAULT_MAX_PARALLEL_QUERIES),
                k,
                seed,
                ..SelectionConfig::default()
            };
            let outcome: SelectionOutcome = match backend.backend()? {
                Backend::Local(engine) => supervision::select_rl_data(&engine, &examples, &cfg, backend.parallelism).await,
                Backend::Remote { client, scripts } => {
                    client
                        .rl_select(&SelectRequest { dataset: examples, config: cfg, scripts, parallelism: backend.parallelism })
                        .await?
                }
            };
            eprintln!("kept {} of {} questions", outcome.kept.len(), outcome.reports.len());
            io::write_jsonl(&out, &outcome.kept)?;
            if let Some(path) = reports {
                io::write_jsonl(&path, &outcome.reports)?;
            }
        }
        Command::Mix { hard, correct, fraction, seed, out } => {
            let hard: Vec<Value> = io::read_jsonl(&hard)?;
            let correct: Vec<Value> = io::read_jsonl(&correct)?;
            let mixed = mix_datasets(&hard, &correct, fraction, seed)?;
            eprintln!("{} hard + {} correct = {}", hard.len(), mixed.len() - hard.len(), mixed.len());
            io::write_jsonl(&out, &mixed)?;
        }
        Command::Convert { input, output, skip_invalid } => {
            let mut converted = Vec::new();
            let mut skipped = 0;
            for (n, line) in std::io::BufRead::lines(io::open(&input)?).enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let result = serde_json::from_str::<Value>(&line)
                    .map_err(|e| e.to_string())
                    .and_then(|v| convert_record(&v, &format!("line-{}", n + 1)));
                match result {
                    Ok(example) => converted.push(example),
                    Err(reason) if skip_invalid => {
                        skipped += 1;
                        tracing::warn!("{}:{}: {reason}", input.display(), n + 1);
                    }
                    Err(reason) => bail!("{}:{}: {reason}", input.display(), n + 1),
                }
            }
            io::write_jsonl(&output, &converted)?;
            eprintln!("converted {} records ({skipped} skipped)", converted.len());
        }
    }
    Ok(())
}

async fn serve(index: Option<PathBuf>, retriever_url: Option<String>, addr: SocketAddr, frozen_clock: bool) -> Result<()> {
    let mut state = match (index, retriever_url) {
        (Some(path), _) => AppState::from_index(Index::load(&path).with_context(|| format!("cannot load {}", path.display()))?),
        (None, Some(url)) => AppState::new(Arc::new(RemoteRetriever::new(RemoteRetrieverConfig::new(url))?)),
        (None, None) => bail!("pass --index or --retriever-url"),
    };
    if std::env::var_os(ENV_ENDPOINT).is_some() {
        let model = ChatModel::from_env()?;
        let name = model.config().model.clone();
        state = state.with_model(name, Arc::new(model));
    }
    if frozen_clock {
        state = state.with_clock(Arc::new(FrozenClock));
    }
    let listener = tokio::net::TcpListener::bind(addr).await?;
    println!("listening on http://{}", listener.local_addr()?);
    std::io::stdout().flush()?;
    searchloop_server::serve(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}

fn print_hits(hits: &[SearchHit], json: bool) -> Result<()> {
    let mut out = std::io::stdout().lock();
    for hit in hits {
        if json {
            serde_json::to_writer(&mut out, hit)?;
            writeln!(out)?;
        } else {
            writeln!(out, "{}\t{:.4}\t{}\t{}", hit.rank, hit.score, hit.passage_id, hit.title)?;
        }
    }
    Ok(())
}

fn summarize_batch(outcome: &BatchOutcome) {
    let failed = outcome.traces.iter().filter(|t| t.termination == Termination::Failed).count();
    eprintln!(
        "{} episodes: answered {:.1}%, mean retrievals {:.3}, mean time {:.3}s, {failed} failed",
        outcome.metrics.episodes,
        outcome.metrics.answered_fraction * 100.0,
        outcome.metrics.mean_retrieval_count,
        outcome.metrics.mean_wall_time
    );
}

fn write_rows_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut writer = csv::Writer::from_writer(io::create(path)?);
    writer.write_record(["id", "predicted", "em", "retrieval_count", "time", "termination"])?;
    for row in &report.per_example {
        writer.write_record([
            row.id.as_str(),
            row.predicted.as_deref().unwrap_or(""),
            &row.em.to_string(),
            &row.retrieval_count.to_string(),
            &row.time.to_string(),
            row.termination.name(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

fn write_paired_csv(path: &Path, paired: &PairedReport) -> Result<()> {
    let mut writer = csv::Writer::from_writer(io::create(path)?);
    writer.write_record(["id", "em_a", "em_b", "delta_em", "delta_time", "delta_retrieval_count"])?;
    for row in &paired.rows {
        writer.write_record([
            row.id.clone(),
            row.em_a.to_string(),
            row.em_b.to_string(),
            row.delta_em.to_string(),
            row.delta_time.to_string(),
            row.delta_retrieval_count.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
