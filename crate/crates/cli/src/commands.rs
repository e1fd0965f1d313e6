use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use spanlight_core::annotator::{annotate_dataset, AnnotateOptions, AnnotationPair, HttpLlmClient, LlmClient, LlmClientConfig, MockLlm};
use spanlight_core::eval::{bench_overhead, plausibility, predict, recall_at_k, run_queries, Averaging, GoldMask, Qrel};
use spanlight_core::index::{build_index_with, read_manifest, TextEntry};
use spanlight_core::io::{read_jsonl, write_json, write_jsonl};
use spanlight_core::trainer::{
    encode_instances, make_synthetic_dataset, read_dataset, read_params, train, write_params, SyntheticConfig,
    TrainConfig,
};
use spanlight_core::{EmbedderConfig, Encoder, Error, HeadParams, Index, Threshold};

use crate::service::{self, ServiceConfig};

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

type CliResult = Result<Value, CliError>;

#[derive(Parser, Debug)]
#[command(name = "spanlight", version, about = "Late-interaction search with token-level evidence")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Encode a JSON-lines corpus into an index directory.
    Index(IndexArgs),
    /// Train the projection and relevance head on a distillation dataset.
    Train(TrainArgs),
    /// Collect evidence spans for query-passage pairs from an LLM.
    Annotate(AnnotateArgs),
    /// Token-level F1 of predicted relevance against gold masks.
    EvalPlausibility(PlausibilityArgs),
    /// Recall@k of the index against relevance judgments.
    EvalRecall(RecallArgs),
    /// Latency and FLOP overhead of the relevance head.
    Bench(BenchArgs),
    /// Serve the HTTP search API.
    Serve(ServeArgs),
    /// Write the planted-evidence synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct EmbedArgs {
    /// Embedding dimension h.
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub embed_seed: u64,
    #[arg(long, default_value_t = 2)]
    pub context_window: usize,
    #[arg(long, default_value_t = 0.5)]
    pub mix_weight: f32,
    #[arg(long, default_value_t = 180)]
    pub max_tokens: usize,
}

impl EmbedArgs {
    fn config(&self) -> EmbedderConfig {
        EmbedderConfig {
            dim: self.dim,
            seed: self.embed_seed,
            context_window: self.context_window,
            mix_weight: self.mix_weight,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Trained weights whose projection is applied before storing.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[command(flatten)]
    pub embed: EmbedArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "params.bin")]
    pub out: PathBuf,
    /// Per-epoch loss curve as JSON lines.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub teacher_temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    pub student_temperature: f64,
    #[command(flatten)]
    pub embed: EmbedArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum MockKind {
    /// Marks passage tokens that repeat query words.
    Lexical,
    /// Always answers `[]`.
    Empty,
}

#[derive(Args, Debug)]
pub struct AnnotateArgs {
    /// JSON lines of `{qid, query, pid, text}`.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "http://127.0.0.1:8000/v1")]
    pub base_url: String,
    #[arg(long, default_value = "gemma-2-27b-it")]
    pub model: String,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long, default_value_t = 60.0)]
    pub timeout_secs: f64,
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
    #[arg(long, default_value_t = 500)]
    pub backoff_ms: u64,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    /// Use an offline mock instead of the endpoint.
    #[arg(long, value_enum)]
    pub mock: Option<MockKind>,
}

#[derive(Args, Debug)]
pub struct PlausibilityArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// JSON lines with `qid`, `pid` and `targets` (annotation output works).
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Pool token counts across examples instead of averaging per example.
    #[arg(long)]
    pub micro: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RecallArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// JSON lines of `{qid, relevant: [ids]}`.
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Hidden width of a randomly initialised head when no params are given.
    #[arg(long, default_value_t = 768)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub reps: usize,
    /// Use only the first N queries.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value = "bench_report.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Trained weights; overridden by the FGR_PARAMS environment variable.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    #[arg(long, default_value_t = 2000)]
    pub max_query_chars: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub queries: usize,
    #[arg(long, default_value_t = 500)]
    pub corpus_size: usize,
    #[command(flatten)]
    pub embed: EmbedArgs,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Index(a) => index(a),
        Command::Train(a) => train_cmd(a),
        Command::Annotate(a) => annotate(a),
        Command::EvalPlausibility(a) => eval_plausibility(a),
        Command::EvalRecall(a) => eval_recall(a),
        Command::Bench(a) => bench(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
    }
}

/// Opens an index, applying the projection from `params` when given.
pub fn open_index(dir: &Path, params: Option<&Path>) -> Result<(Index, Option<HeadParams>), Error> {
    match params {
        Some(p) => {
            let weights = read_params(p)?;
            let manifest = read_manifest(dir)?;
            let encoder = Encoder::new(manifest.embedder).with_projection(weights.projection)?;
            Ok((Index::open_with(dir, encoder)?, Some(weights.head)))
        }
        None => Ok((Index::open(dir)?, None)),
    }
}

fn index(a: IndexArgs) -> CliResult {
    let mut encoder = Encoder::new(a.embed.config());
    if let Some(p) = &a.params {
        encoder = encoder.with_projection(read_params(p)?.projection)?;
    }
    let manifest = build_index_with(&a.corpus, &encoder, &a.out)?;
    Ok(json!({
        "manifest": a.out.join(spanlight_core::index::MANIFEST_FILE),
        "passages": manifest.passages,
        "dim": manifest.dim,
        "projected": manifest.projected,
    }))
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let emb = a.embed.config();
    let cfg = TrainConfig {
        lambda: a.lambda,
        teacher_temperature: a.teacher_temperature,
        student_temperature: a.student_temperature,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        hidden_dim: a.hidden_dim,
    };
    cfg.validate()?;
    let data = read_dataset(&a.data)?;
    let encoded = encode_instances(&data, &emb)?;
    let outcome = train(&encoded, &cfg)?;
    write_params(&a.out, &outcome.params.to_weights())?;
    if let Some(curve) = &a.curve {
        write_jsonl(curve, &outcome.curve)?;
    }
    let last = outcome.curve.last().map(|e| e.loss).unwrap_or(outcome.initial);
    Ok(json!({
        "params": a.out,
        "instances": data.len(),
        "epochs": cfg.epochs,
        "initial": outcome.initial,
        "final": last,
    }))
}

fn annotate(a: AnnotateArgs) -> CliResult {
    let pairs: Vec<AnnotationPair> = read_jsonl(&a.pairs)?;
    let client: Box<dyn LlmClient> = match a.mock {
        Some(MockKind::Lexical) => Box::new(MockLlm::lexical()),
        Some(MockKind::Empty) => Box::new(MockLlm::new(|_| Ok("[]".into()))),
        None => Box::new(HttpLlmClient::new(LlmClientConfig {
            base_url: a.base_url,
            model: a.model,
            api_key_env: a.api_key_env,
            timeout_secs: a.timeout_secs,
            max_retries: a.max_retries,
            temperature: 0.0,
        })?),
    };
    let opts = AnnotateOptions {
        max_retries: a.max_retries,
        backoff: Duration::from_millis(a.backoff_ms),
        concurrency: a.concurrency.max(1),
    };
    let summary = annotate_dataset(client.as_ref(), &pairs, &a.out, &opts)?;
    let mut v = serde_json::to_value(&summary).expect("summary serializes");
    v["out"] = json!(a.out);
    Ok(v)
}

fn eval_plausibility(a: PlausibilityArgs) -> CliResult {
    let threshold = Threshold::new(a.threshold)?;
    let (index, head) = open_index(&a.index, a.params.as_deref())?;
    let queries: Vec<TextEntry> = read_jsonl(&a.queries)?;
    let gold: Vec<GoldMask> = read_jsonl(&a.gold)?;
    let known: HashMap<&str, ()> = queries.iter().map(|q| (q.id.as_str(), ())).collect();
    let pairs: Vec<GoldMask> = gold.iter().filter(|g| known.contains_key(g.qid.as_str())).cloned().collect();
    let preds = predict(&index, &queries, &pairs, head.as_ref())?;
    let averaging = if a.micro { Averaging::Micro } else { Averaging::Macro };
    let report = plausibility(&preds, &gold, threshold, averaging)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(json!({
        "mean_f1": report.mean_f1,
        "count": report.count,
        "threshold": report.threshold,
        "averaging": report.averaging,
        "head": head.is_some(),
        "missing_gold": report.missing_gold,
        "report": a.out,
    }))
}

fn eval_recall(a: RecallArgs) -> CliResult {
    let (index, _) = open_index(&a.index, a.params.as_deref())?;
    let queries: Vec<TextEntry> = read_jsonl(&a.queries)?;
    let qrels: Vec<Qrel> = read_jsonl(&a.qrels)?;
    let run = run_queries(&index, &queries, a.k)?;
    let recall = recall_at_k(&run, &qrels, a.k)?;
    Ok(json!({"recall": recall, "k": a.k, "queries": qrels.len()}))
}

fn bench(a: BenchArgs) -> CliResult {
    let (index, head) = open_index(&a.index, a.params.as_deref())?;
    let head = head.unwrap_or_else(|| HeadParams::init(index.dim(), a.hidden_dim, a.seed));
    let mut queries: Vec<String> = read_jsonl::<TextEntry>(&a.queries)?.into_iter().map(|q| q.text).collect();
    if let Some(n) = a.limit {
        queries.truncate(n);
    }
    let report = bench_overhead(&index, &queries, &head, a.k, a.reps)?;
    report.write(&a.out)?;
    Ok(json!({
        "report": a.out,
        "transform_ms": report.transform.mean_ms,
        "transform_sd_ms": report.transform.sd_ms,
        "overhead_ratio": report.overhead_ratio,
        "counted_mul_adds": report.counted_mul_adds,
        "analytic_mul_adds": report.analytic_mul_adds,
    }))
}

fn serve(a: ServeArgs) -> CliResult {
    let config = ServiceConfig {
        index_dir: a.index,
        params: a.params,
        host: a.host,
        port: a.port,
        default_k: a.k,
        default_threshold: Threshold::new(a.threshold)?,
        max_query_chars: a.max_query_chars,
    }
    .with_env_override();
    let state = Arc::new(service::load_state(config)?);
    let addr = format!("{}:{}", state.config.host, state.config.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::User(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Internal(e.to_string()))?;
        println!(
            "{}",
            json!({"listening": local.to_string(), "passages": state.index.len(), "h": state.index.dim(), "head": state.head.is_some()})
        );
        axum::serve(listener, service::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Internal(e.to_string()))
    })?;
    Ok(json!({"status": "stopped"}))
}

fn synth(a: SynthArgs) -> CliResult {
    let cfg = SyntheticConfig {
        seed: a.seed,
        num_queries: a.queries,
        corpus_size: a.corpus_size,
        ..SyntheticConfig::default()
    };
    let ds = make_synthetic_dataset(&cfg, &a.embed.config())?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::User(format!("{}: {e}", a.out.display())))?;
    let texts: HashMap<&str, &str> = ds.corpus.iter().map(|e| (e.id.as_str(), e.text.as_str())).collect();
    let pairs: Vec<AnnotationPair> = ds
        .instances
        .iter()
        .map(|i| AnnotationPair {
            qid: i.qid.clone(),
            query: i.query.clone(),
            pid: i.pos.id.clone(),
            text: texts[i.pos.id.as_str()].to_string(),
        })
        .collect();
    write_jsonl(&a.out.join("corpus.jsonl"), &ds.corpus)?;
    write_jsonl(&a.out.join("queries.jsonl"), &ds.queries)?;
    write_jsonl(&a.out.join("train.jsonl"), &ds.instances)?;
    write_jsonl(&a.out.join("qrels.jsonl"), &ds.qrels)?;
    write_jsonl(&a.out.join("gold.jsonl"), &ds.gold)?;
    write_jsonl(&a.out.join("pairs.jsonl"), &pairs)?;
    Ok(json!({
        "out": a.out,
        "passages": ds.corpus.len(),
        "queries": ds.queries.len(),
    }))
}
