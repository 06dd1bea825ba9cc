//! Command-line surface: evaluation runs, ablation grids, sample
//! inspection, fine-tune preparation, and store indexing.
//!
//! Every option can also come from a config file (TOML or JSON, flat keys
//! named like the flags); explicit flags win over config values, config
//! values win over built-in defaults. Exit codes: 0 success, 1 fatal
//! (bad flags, unreadable dataset, impossible config), 2 partial (some
//! samples or cells errored, or skipped fine-tune samples).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use crate::backend::{GenerationBackend, HttpGenerator, WireFormat};
use crate::corpus::{load_dataset, RepoFile, RepoSample};
use crate::embed::{embed_batch, EmbedderConfig, HttpEmbedder};
use crate::ftprep::{export_jsonl, prepare_ft_dataset};
use crate::metrics::{
    edit_similarity, exact_match, write_records_jsonl, write_summary_csv, write_summary_json,
    EvalSummary, DEFAULT_BUCKETS,
};
use crate::pipeline::{
    assemble_prompt_detailed, direct_prompt, first_line, ContextOrder, PathTaken, PipelineConfig,
    PromptTemplate,
};
use crate::runner::{
    evaluate_samples, sha256_file, unix_now, write_manifest, RunManifest, RunSettings,
};
use crate::split::{make_chunks, SplitKeyword, SplitStrategy};
use crate::store::build_store;
use crate::tokenize::{ExternalTokenizer, TokenCounter};

#[derive(Parser, Debug)]
#[command(
    name = "rtlrag",
    version,
    about = "Retrieval-augmented next-line completion for Verilog repositories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the pipeline over a dataset and write records and summaries.
    Evaluate(EvaluateArgs),
    /// Run an evaluation grid over split, chunk size, embedder and gate.
    Ablate(AblateArgs),
    /// Show one sample's path decision, ranking and assembled prompt.
    Inspect(InspectArgs),
    /// Build input/output pairs for supervised fine-tuning.
    PrepareFinetune(PrepareFinetuneArgs),
    /// Build and persist a vector store for one sample or a repo directory.
    Index(IndexArgs),
}

/// Pipeline options that are never grid axes.
#[derive(Args, Debug, Clone, Default)]
struct BaseFlags {
    /// Total prompt token budget.
    #[arg(long)]
    budget: Option<usize>,
    /// Token counting scheme: char4, wspunct or external.
    #[arg(long)]
    tokenizer: Option<String>,
    /// Counting endpoint for --tokenizer external.
    #[arg(long)]
    tokenizer_endpoint: Option<String>,
    /// Hash embedder dimension.
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Embeddings endpoint for --embedder http.
    #[arg(long)]
    embed_endpoint: Option<String>,
    /// Model name sent to the embeddings endpoint.
    #[arg(long)]
    embed_model: Option<String>,
    /// Embedder input window; longer texts are truncated to their head.
    #[arg(long)]
    embed_max_input_tokens: Option<usize>,
    /// Prompt template: default-v1 or instruct-v1.
    #[arg(long)]
    template: Option<String>,
    /// Retrieved chunk order in the prompt: desc or asc relevance.
    #[arg(long)]
    context_order: Option<String>,
    /// HTTP timeout for embedders, tokenizers and backends.
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// Config file (TOML or JSON) with flag-named keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// The pipeline options that ablation turns into grid axes; single-valued
/// everywhere else.
#[derive(Args, Debug, Clone, Default)]
struct AxisFlags {
    /// Split keyword: line, endmodule or para.
    #[arg(long)]
    split: Option<String>,
    /// Chunk merge budget in tokens.
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Embedder: hash or http.
    #[arg(long)]
    embedder: Option<String>,
    /// Disable the length gate; every sample takes the retrieval path.
    #[arg(long)]
    no_gate: bool,
}

#[derive(Args, Debug, Clone, Default)]
struct BackendFlags {
    /// Generation backend: http, echo-target, copy-last-line or fixed:<s>.
    #[arg(long)]
    backend: Option<String>,
    /// Completions endpoint for --backend http.
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the completions endpoint.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Generation cap per request.
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Request shape: completion or chat.
    #[arg(long)]
    wire: Option<String>,
    /// Concurrent in-flight requests per HTTP client.
    #[arg(long)]
    max_in_flight: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct RunFlags {
    /// Worker threads; defaults to available parallelism, capped by the
    /// backend's in-flight limit.
    #[arg(long)]
    workers: Option<usize>,
    /// Evaluate only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Evaluate only samples whose repo+prefix context reaches this count.
    #[arg(long)]
    min_context_tokens: Option<usize>,
    /// Seed recorded in the manifest and used wherever sampling happens.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Dataset JSONL path.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for records.jsonl, summary.json, summary.csv and
    /// manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    base: BaseFlags,
    #[command(flatten)]
    axis: AxisFlags,
    #[command(flatten)]
    backend: BackendFlags,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory; per-cell artifacts land in cells/, the grid
    /// summary in ablation.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Split keywords to sweep (repeat or comma-separate).
    #[arg(long, value_delimiter = ',')]
    split: Vec<String>,
    /// Chunk sizes to sweep.
    #[arg(long, value_delimiter = ',')]
    chunk_size: Vec<usize>,
    /// Embedders to sweep.
    #[arg(long, value_delimiter = ',')]
    embedder: Vec<String>,
    /// Gate settings to sweep: on, off.
    #[arg(long, value_delimiter = ',')]
    gate: Vec<String>,
    /// Cells to run in parallel.
    #[arg(long)]
    jobs: Option<usize>,
    /// Skip cells whose summary.json already exists.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    base: BaseFlags,
    #[command(flatten)]
    backend: BackendFlags,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Sample to inspect.
    #[arg(long)]
    sample_id: String,
    /// Print token counts instead of file contents.
    #[arg(long)]
    no_text: bool,
    #[command(flatten)]
    base: BaseFlags,
    #[command(flatten)]
    axis: AxisFlags,
    #[command(flatten)]
    backend: BackendFlags,
}

#[derive(Args, Debug)]
struct PrepareFinetuneArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output JSONL file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sample N records uniformly without replacement (seeded by --seed).
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite an existing output file.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    base: BaseFlags,
}

#[derive(Args, Debug)]
struct IndexArgs {
    /// Dataset JSONL path (with --sample-id).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Index this sample's repository context.
    #[arg(long)]
    sample_id: Option<String>,
    /// Index the Verilog files under this directory instead.
    #[arg(long)]
    repo_dir: Option<PathBuf>,
    /// Output store file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing store file.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    base: BaseFlags,
    #[command(flatten)]
    axis: AxisFlags,
}

/// Flat key/value pairs from a config file. Keys are flag names
/// (kebab-case, no leading dashes).
#[derive(Debug, Default)]
struct Overrides(BTreeMap<String, serde_json::Value>);

const KNOWN_KEYS: &[&str] = &[
    "dataset",
    "out",
    "budget",
    "tokenizer",
    "tokenizer-endpoint",
    "split",
    "chunk-size",
    "embedder",
    "embed-dim",
    "embed-endpoint",
    "embed-model",
    "embed-max-input-tokens",
    "template",
    "context-order",
    "no-gate",
    "timeout-secs",
    "backend",
    "endpoint",
    "model",
    "temperature",
    "max-tokens",
    "wire",
    "max-in-flight",
    "workers",
    "limit",
    "min-context-tokens",
    "seed",
    "jobs",
];

fn toml_to_json(value: toml::Value) -> serde_json::Value {
    serde_json::to_value(value).expect("toml values map onto json")
}

impl Overrides {
    fn load(path: Option<&Path>) -> Result<Overrides> {
        let Some(path) = path else {
            return Ok(Overrides::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let value: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .with_context(|| format!("parsing {} as JSON", path.display()))?
        } else {
            toml_to_json(
                text.parse::<toml::Value>()
                    .with_context(|| format!("parsing {} as TOML", path.display()))?,
            )
        };
        let serde_json::Value::Object(map) = value else {
            bail!("config file {} must be a flat table", path.display());
        };
        let mut flat = BTreeMap::new();
        for (key, value) in map {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                bail!("config file {}: unknown key `{key}`", path.display());
            }
            if value.is_object() || value.is_array() {
                bail!("config file {}: key `{key}` must be a scalar", path.display());
            }
            flat.insert(key, value);
        }
        Ok(Overrides(flat))
    }

    fn string(&self, key: &str) -> Result<Option<String>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
            Some(other) => bail!("config key `{key}` must be a string, got {other}"),
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(value) => value
                .as_u64()
                .and_then(|n| usize::try_from(n).ok())
                .map(Some)
                .with_context(|| format!("config key `{key}` must be a non-negative integer")),
        }
    }

    fn u64(&self, key: &str) -> Result<Option<u64>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(value) => value
                .as_u64()
                .map(Some)
                .with_context(|| format!("config key `{key}` must be a non-negative integer")),
        }
    }

    fn f64(&self, key: &str) -> Result<Option<f64>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(value) => value
                .as_f64()
                .map(Some)
                .with_context(|| format!("config key `{key}` must be a number")),
        }
    }

    fn bool(&self, key: &str) -> Result<Option<bool>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(serde_json::Value::Bool(b)) => Ok(Some(*b)),
            Some(other) => bail!("config key `{key}` must be a boolean, got {other}"),
        }
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.string(key)?.map(PathBuf::from))
    }
}

fn parse_from_str<T: std::str::FromStr<Err = String>>(what: &str, s: &str) -> Result<T> {
    s.parse::<T>()
        .map_err(|e| anyhow::Error::msg(e).context(format!("bad {what}")))
}

/// All pipeline settings materialized, plus their JSON image for the
/// manifest.
#[derive(Debug)]
struct ResolvedPipeline {
    config: PipelineConfig,
    json: serde_json::Value,
}

fn resolve_counter(base: &BaseFlags, cfg: &Overrides, timeout: Duration) -> Result<TokenCounter> {
    let name = base
        .tokenizer
        .clone()
        .or(cfg.string("tokenizer")?)
        .unwrap_or_else(|| "char4".to_string());
    match name.as_str() {
        "char4" => Ok(TokenCounter::Char4),
        "wspunct" => Ok(TokenCounter::WhitespacePunct),
        "external" => {
            let endpoint = base
                .tokenizer_endpoint
                .clone()
                .or(cfg.string("tokenizer-endpoint")?)
                .context("--tokenizer external requires --tokenizer-endpoint")?;
            Ok(TokenCounter::External(ExternalTokenizer::new(
                endpoint, timeout,
            )))
        }
        other => bail!("unknown tokenizer `{other}` (expected char4, wspunct or external)"),
    }
}

fn resolve_embedder(
    name: &str,
    base: &BaseFlags,
    cfg: &Overrides,
    timeout: Duration,
    max_in_flight: usize,
) -> Result<(EmbedderConfig, serde_json::Value)> {
    match name {
        "hash" => {
            let dim = base.embed_dim.or(cfg.usize("embed-dim")?).unwrap_or(256);
            if dim < 2 {
                bail!("--embed-dim must be at least 2");
            }
            Ok((
                EmbedderConfig::hashed(dim),
                serde_json::json!({"embedder": "hash", "embed_dim": dim}),
            ))
        }
        "http" => {
            let endpoint = base
                .embed_endpoint
                .clone()
                .or(cfg.string("embed-endpoint")?)
                .context("--embedder http requires --embed-endpoint")?;
            let model = base
                .embed_model
                .clone()
                .or(cfg.string("embed-model")?)
                .unwrap_or_else(|| "default".to_string());
            let window = base
                .embed_max_input_tokens
                .or(cfg.usize("embed-max-input-tokens")?)
                .unwrap_or(8192);
            if window < 1 {
                bail!("--embed-max-input-tokens must be at least 1");
            }
            let json = serde_json::json!({
                "embedder": "http",
                "embed_endpoint": endpoint,
                "embed_model": model,
                "embed_max_input_tokens": window,
            });
            let embedder = HttpEmbedder::new(endpoint, model, window, timeout, max_in_flight);
            Ok((EmbedderConfig::http(embedder), json))
        }
        other => bail!("unknown embedder `{other}` (expected hash or http)"),
    }
}

fn resolve_pipeline(base: &BaseFlags, axis: &AxisFlags, cfg: &Overrides) -> Result<ResolvedPipeline> {
    let timeout = Duration::from_secs(
        base.timeout_secs
            .or(cfg.u64("timeout-secs")?)
            .unwrap_or(30),
    );
    let budget = base.budget.or(cfg.usize("budget")?).unwrap_or(10240);
    if budget < 1 {
        bail!("--budget must be at least 1");
    }
    let tokenizer_name = base
        .tokenizer
        .clone()
        .or(cfg.string("tokenizer")?)
        .unwrap_or_else(|| "char4".to_string());
    let counter = resolve_counter(base, cfg, timeout)?;

    let split_name = axis
        .split
        .clone()
        .or(cfg.string("split")?)
        .unwrap_or_else(|| "line".to_string());
    let keyword: SplitKeyword = parse_from_str("--split", &split_name)?;
    let chunk_size = axis
        .chunk_size
        .or(cfg.usize("chunk-size")?)
        .unwrap_or(4096);
    if chunk_size < 1 {
        bail!("--chunk-size must be at least 1");
    }

    let embedder_name = axis
        .embedder
        .clone()
        .or(cfg.string("embedder")?)
        .unwrap_or_else(|| "hash".to_string());
    let (embedder, embedder_json) = resolve_embedder(&embedder_name, base, cfg, timeout, 4)?;

    let template_name = base
        .template
        .clone()
        .or(cfg.string("template")?)
        .unwrap_or_else(|| "default-v1".to_string());
    let template: PromptTemplate = parse_from_str("--template", &template_name)?;
    let order_name = base
        .context_order
        .clone()
        .or(cfg.string("context-order")?)
        .unwrap_or_else(|| "desc".to_string());
    let context_order: ContextOrder = parse_from_str("--context-order", &order_name)?;
    let gate_enabled = !(axis.no_gate || cfg.bool("no-gate")?.unwrap_or(false));

    let mut json = serde_json::json!({
        "budget": budget,
        "tokenizer": tokenizer_name,
        "split": keyword.name(),
        "chunk_size": chunk_size,
        "template": template.name(),
        "context_order": match context_order { ContextOrder::Desc => "desc", ContextOrder::Asc => "asc" },
        "gate": gate_enabled,
        "timeout_secs": timeout.as_secs(),
    });
    if let Some(endpoint) = base
        .tokenizer_endpoint
        .clone()
        .or(cfg.string("tokenizer-endpoint")?)
    {
        if tokenizer_name == "external" {
            json["tokenizer_endpoint"] = serde_json::json!(endpoint);
        }
    }
    for (key, value) in embedder_json.as_object().expect("object literal") {
        json[key] = value.clone();
    }

    Ok(ResolvedPipeline {
        config: PipelineConfig {
            budget,
            strategy: SplitStrategy::new(keyword, chunk_size),
            embedder,
            counter,
            gate_enabled,
            template,
            context_order,
        },
        json,
    })
}

struct ResolvedBackend {
    backend: GenerationBackend,
    /// In-flight cap when the backend is HTTP; bounds the default worker
    /// count.
    in_flight: Option<usize>,
    json: serde_json::Value,
}

fn resolve_backend(
    flags: &BackendFlags,
    base: &BaseFlags,
    cfg: &Overrides,
) -> Result<Option<ResolvedBackend>> {
    let Some(name) = flags.backend.clone().or(cfg.string("backend")?) else {
        return Ok(None);
    };
    if let Some(text) = name.strip_prefix("fixed:") {
        return Ok(Some(ResolvedBackend {
            backend: GenerationBackend::FixedString(text.to_string()),
            in_flight: None,
            json: serde_json::json!({"backend": "fixed", "text": text}),
        }));
    }
    match name.as_str() {
        "echo-target" => Ok(Some(ResolvedBackend {
            backend: GenerationBackend::EchoTarget,
            in_flight: None,
            json: serde_json::json!({"backend": "echo-target"}),
        })),
        "copy-last-line" => Ok(Some(ResolvedBackend {
            backend: GenerationBackend::CopyLastLine,
            in_flight: None,
            json: serde_json::json!({"backend": "copy-last-line"}),
        })),
        "http" => {
            let endpoint = flags
                .endpoint
                .clone()
                .or(cfg.string("endpoint")?)
                .context("--backend http requires --endpoint")?;
            let model = flags
                .model
                .clone()
                .or(cfg.string("model")?)
                .unwrap_or_else(|| "default".to_string());
            let temperature = flags
                .temperature
                .or(cfg.f64("temperature")?)
                .unwrap_or(0.2);
            if !(0.0..=2.0).contains(&temperature) {
                bail!("--temperature must be within [0, 2]");
            }
            let max_tokens = flags.max_tokens.or(cfg.usize("max-tokens")?).unwrap_or(64);
            if max_tokens < 1 {
                bail!("--max-tokens must be at least 1");
            }
            let wire_name = flags
                .wire
                .clone()
                .or(cfg.string("wire")?)
                .unwrap_or_else(|| "completion".to_string());
            let wire: WireFormat = parse_from_str("--wire", &wire_name)?;
            let in_flight = flags
                .max_in_flight
                .or(cfg.usize("max-in-flight")?)
                .unwrap_or(4);
            if in_flight < 1 {
                bail!("--max-in-flight must be at least 1");
            }
            let timeout = Duration::from_secs(
                base.timeout_secs
                    .or(cfg.u64("timeout-secs")?)
                    .unwrap_or(30),
            );
            let generator = HttpGenerator::new(&endpoint, &model, wire, timeout, in_flight)
                .with_sampling(temperature, max_tokens);
            Ok(Some(ResolvedBackend {
                backend: GenerationBackend::Http(generator),
                in_flight: Some(in_flight),
                json: serde_json::json!({
                    "backend": "http",
                    "endpoint": endpoint,
                    "model": model,
                    "temperature": temperature,
                    "max_tokens": max_tokens,
                    "wire": wire_name,
                    "max_in_flight": in_flight,
                }),
            }))
        }
        other => bail!(
            "unknown backend `{other}` (expected http, echo-target, copy-last-line or fixed:<s>)"
        ),
    }
}

fn require_backend(resolved: Option<ResolvedBackend>) -> Result<ResolvedBackend> {
    resolved.context("no backend configured; pass --backend or set it in the config file")
}

struct ResolvedRun {
    workers: usize,
    limit: Option<usize>,
    min_context_tokens: Option<usize>,
    json: serde_json::Value,
}

fn resolve_run(flags: &RunFlags, cfg: &Overrides, in_flight: Option<usize>) -> Result<ResolvedRun> {
    let default_workers = std::thread::available_parallelism().map_or(4, |n| n.get());
    let workers = flags
        .workers
        .or(cfg.usize("workers")?)
        .unwrap_or_else(|| default_workers.min(in_flight.unwrap_or(usize::MAX)))
        .max(1);
    let limit = flags.limit.or(cfg.usize("limit")?);
    let min_context_tokens = flags
        .min_context_tokens
        .or(cfg.usize("min-context-tokens")?);
    let seed = flags.seed.or(cfg.u64("seed")?).unwrap_or(0);
    let json = serde_json::json!({
        "workers": workers,
        "limit": limit,
        "min_context_tokens": min_context_tokens,
        "seed": seed,
        "buckets": DEFAULT_BUCKETS,
    });
    Ok(ResolvedRun {
        workers,
        limit,
        min_context_tokens,
        json,
    })
}

/// Runs one evaluation and writes all artifacts into `out_dir`. The caller
/// has already loaded the dataset so a missing file never creates the
/// directory.
#[allow(clippy::too_many_arguments)]
fn run_evaluation(
    samples: &[RepoSample],
    settings: &RunSettings,
    resolved: serde_json::Value,
    out_dir: &Path,
    argv: &[String],
    dataset_path: &Path,
    dataset_sha256: String,
    started_unix: u64,
) -> Result<EvalSummary> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    let output = evaluate_samples(samples, settings, resolved.clone());
    if output.filtered_out > 0 {
        eprintln!(
            "note: {} samples below the min-context-tokens threshold were skipped",
            output.filtered_out
        );
    }
    write_records_jsonl(&output.records, &out_dir.join("records.jsonl"))?;
    write_summary_json(&output.summary, &out_dir.join("summary.json"))?;
    write_summary_csv(&output.summary, &out_dir.join("summary.csv"))?;
    let manifest = RunManifest {
        command_line: argv.to_vec(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset_path: dataset_path.display().to_string(),
        dataset_sha256,
        started_unix,
        finished_unix: unix_now(),
        resolved_config: resolved,
    };
    write_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(output.summary)
}

fn cmd_evaluate(args: EvaluateArgs, argv: &[String]) -> Result<i32> {
    let cfg = Overrides::load(args.base.config.as_deref())?;
    let dataset_path = args
        .dataset
        .or(cfg.path("dataset")?)
        .context("--dataset is required")?;
    let out_dir = args.out.or(cfg.path("out")?).context("--out is required")?;
    let pipeline = resolve_pipeline(&args.base, &args.axis, &cfg)?;
    let backend = require_backend(resolve_backend(&args.backend, &args.base, &cfg)?)?;
    let run = resolve_run(&args.run, &cfg, backend.in_flight)?;

    let started = unix_now();
    let dataset = load_dataset(&dataset_path, run.limit)?;
    let sha = sha256_file(&dataset_path)
        .with_context(|| format!("hashing {}", dataset_path.display()))?;

    let settings = RunSettings {
        pipeline: pipeline.config,
        backend: backend.backend,
        workers: run.workers,
        buckets: DEFAULT_BUCKETS.to_vec(),
        min_context_tokens: run.min_context_tokens,
    };
    let resolved = serde_json::json!({
        "command": "evaluate",
        "dataset": dataset_path.display().to_string(),
        "pipeline": pipeline.json,
        "backend": backend.json,
        "run": run.json,
    });
    let summary = run_evaluation(
        &dataset.samples,
        &settings,
        resolved,
        &out_dir,
        argv,
        &dataset_path,
        sha,
        started,
    )?;
    println!(
        "evaluated {} samples ({} errors): em {:.2} es {:.2} (raw em {:.2} es {:.2}) -> {}",
        summary.n,
        summary.errors,
        summary.em_pct,
        summary.es_mean,
        summary.em_raw_pct,
        summary.es_raw_mean,
        out_dir.display()
    );
    Ok(if summary.errors > 0 { 2 } else { 0 })
}

#[derive(Debug, Clone)]
struct Cell {
    split: SplitKeyword,
    chunk_size: usize,
    embedder: String,
    gate: bool,
}

impl Cell {
    fn dir_name(&self) -> String {
        format!(
            "split-{}_chunk-{}_emb-{}_gate-{}",
            self.split.name(),
            self.chunk_size,
            self.embedder,
            if self.gate { "on" } else { "off" }
        )
    }
}

#[derive(Debug)]
struct CellRow {
    cell: Cell,
    status: &'static str,
    n: Option<usize>,
    em: Option<f64>,
    es: Option<f64>,
}

fn cell_row_ok(cell: Cell, summary: &EvalSummary) -> CellRow {
    CellRow {
        cell,
        status: "ok",
        n: Some(summary.n),
        em: Some(summary.em_pct),
        es: Some(summary.es_mean),
    }
}

fn write_ablation_csv(rows: &[CellRow], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    writer.write_record(["split", "chunk_size", "embedder", "gate", "status", "n", "em", "es"])?;
    for row in rows {
        writer.write_record([
            row.cell.split.name().to_string(),
            row.cell.chunk_size.to_string(),
            row.cell.embedder.clone(),
            if row.cell.gate { "on" } else { "off" }.to_string(),
            row.status.to_string(),
            row.n.map_or(String::new(), |n| n.to_string()),
            row.em.map_or(String::new(), |v| format!("{v:.6}")),
            row.es.map_or(String::new(), |v| format!("{v:.6}")),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

fn cmd_ablate(args: AblateArgs, argv: &[String]) -> Result<i32> {
    let cfg = Overrides::load(args.base.config.as_deref())?;
    let dataset_path = args
        .dataset
        .or(cfg.path("dataset")?)
        .context("--dataset is required")?;
    let out_dir = args.out.or(cfg.path("out")?).context("--out is required")?;
    let backend = require_backend(resolve_backend(&args.backend, &args.base, &cfg)?)?;
    let run = resolve_run(&args.run, &cfg, backend.in_flight)?;
    let jobs = args.jobs.or(cfg.usize("jobs")?).unwrap_or(1).max(1);

    let splits: Vec<SplitKeyword> = if args.split.is_empty() {
        vec![SplitKeyword::LineBreak]
    } else {
        args.split
            .iter()
            .map(|s| parse_from_str("--split", s))
            .collect::<Result<_>>()?
    };
    let chunk_sizes = if args.chunk_size.is_empty() {
        vec![4096]
    } else {
        args.chunk_size.clone()
    };
    if chunk_sizes.iter().any(|&c| c < 1) {
        bail!("--chunk-size must be at least 1");
    }
    let embedders = if args.embedder.is_empty() {
        vec!["hash".to_string()]
    } else {
        args.embedder.clone()
    };
    let gates: Vec<bool> = if args.gate.is_empty() {
        vec![true]
    } else {
        args.gate
            .iter()
            .map(|g| match g.as_str() {
                "on" => Ok(true),
                "off" => Ok(false),
                other => bail!("unknown gate value `{other}` (expected on or off)"),
            })
            .collect::<Result<_>>()?
    };

    // validate every cell's settings up front so a typo is fatal rather
    // than a row of errors
    let mut cells = Vec::new();
    for &split in &splits {
        for &chunk_size in &chunk_sizes {
            for embedder in &embedders {
                for &gate in &gates {
                    let axis = AxisFlags {
                        split: Some(split.name().to_string()),
                        chunk_size: Some(chunk_size),
                        embedder: Some(embedder.clone()),
                        no_gate: !gate,
                    };
                    resolve_pipeline(&args.base, &axis, &cfg)?;
                    cells.push(Cell {
                        split,
                        chunk_size,
                        embedder: embedder.clone(),
                        gate,
                    });
                }
            }
        }
    }

    let started = unix_now();
    let dataset = load_dataset(&dataset_path, run.limit)?;
    let sha = sha256_file(&dataset_path)
        .with_context(|| format!("hashing {}", dataset_path.display()))?;
    std::fs::create_dir_all(out_dir.join("cells"))
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;

    let run_cell = |cell: &Cell| -> Result<EvalSummary> {
        let cell_dir = out_dir.join("cells").join(cell.dir_name());
        let summary_path = cell_dir.join("summary.json");
        if args.resume && summary_path.exists() {
            if let Ok(summary) = std::fs::read_to_string(&summary_path)
                .map_err(anyhow::Error::from)
                .and_then(|text| Ok(serde_json::from_str::<EvalSummary>(&text)?))
            {
                return Ok(summary);
            }
        }
        let axis = AxisFlags {
            split: Some(cell.split.name().to_string()),
            chunk_size: Some(cell.chunk_size),
            embedder: Some(cell.embedder.clone()),
            no_gate: !cell.gate,
        };
        let pipeline = resolve_pipeline(&args.base, &axis, &cfg)?;
        let settings = RunSettings {
            pipeline: pipeline.config,
            backend: backend.backend.clone(),
            workers: run.workers,
            buckets: DEFAULT_BUCKETS.to_vec(),
            min_context_tokens: run.min_context_tokens,
        };
        let resolved = serde_json::json!({
            "command": "ablate",
            "cell": cell.dir_name(),
            "dataset": dataset_path.display().to_string(),
            "pipeline": pipeline.json,
            "backend": backend.json,
            "run": run.json,
        });
        run_evaluation(
            &dataset.samples,
            &settings,
            resolved,
            &cell_dir,
            argv,
            &dataset_path,
            sha.clone(),
            started,
        )
    };

    let outcomes: Vec<Result<EvalSummary>> = if jobs == 1 {
        cells.iter().map(&run_cell).collect()
    } else {
        let cursor = std::sync::atomic::AtomicUsize::new(0);
        let slots: std::sync::Mutex<Vec<Option<Result<EvalSummary>>>> =
            std::sync::Mutex::new((0..cells.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(cells.len()) {
                scope.spawn(|| loop {
                    let index = cursor.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if index >= cells.len() {
                        break;
                    }
                    let outcome = run_cell(&cells[index]);
                    slots.lock().unwrap()[index] = Some(outcome);
                });
            }
        });
        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|slot| slot.expect("every cell ran"))
            .collect()
    };

    let mut rows = Vec::with_capacity(cells.len());
    let mut failed = 0usize;
    for (cell, outcome) in cells.into_iter().zip(outcomes) {
        match outcome {
            Ok(summary) => {
                println!(
                    "cell {}: n={} em={:.2} es={:.2}",
                    cell.dir_name(),
                    summary.n,
                    summary.em_pct,
                    summary.es_mean
                );
                rows.push(cell_row_ok(cell, &summary));
            }
            Err(e) => {
                eprintln!("cell {} failed: {e:#}", cell.dir_name());
                failed += 1;
                rows.push(CellRow {
                    cell,
                    status: "error",
                    n: None,
                    em: None,
                    es: None,
                });
            }
        }
    }
    write_ablation_csv(&rows, &out_dir.join("ablation.csv"))?;
    println!(
        "wrote {} cells to {}",
        rows.len(),
        out_dir.join("ablation.csv").display()
    );
    Ok(if failed > 0 { 2 } else { 0 })
}

fn cmd_inspect(args: InspectArgs) -> Result<i32> {
    let cfg = Overrides::load(args.base.config.as_deref())?;
    let dataset_path = args
        .dataset
        .clone()
        .or(cfg.path("dataset")?)
        .context("--dataset is required")?;
    let pipeline = resolve_pipeline(&args.base, &args.axis, &cfg)?;
    let backend = resolve_backend(&args.backend, &args.base, &cfg)?;

    let dataset = load_dataset(&dataset_path, None)?;
    let sample = dataset
        .samples
        .iter()
        .find(|s| s.id == args.sample_id)
        .with_context(|| format!("unknown sample id `{}`", args.sample_id))?;

    let config = &pipeline.config;
    let direct = direct_prompt(config.template, sample);
    let direct_tokens = config.counter.count(&direct)?;
    println!("sample: {}", sample.id);
    println!("repo: {}", sample.repo);
    println!("context files: {}", sample.context_files.len());
    println!(
        "context tokens: {} (repo files + current prefix)",
        crate::runner::context_token_count(config, sample)?
    );
    println!("budget: {}", config.budget);
    println!("gate: {}", if config.gate_enabled { "on" } else { "off" });
    println!("direct prompt tokens: {direct_tokens}");

    let (assembly, ranking) = assemble_prompt_detailed(config, sample)?;
    println!(
        "path: {}",
        match assembly.path_taken {
            PathTaken::Direct => "direct",
            PathTaken::Rag => "rag",
        }
    );
    if let Some(retrieved) = &assembly.retrieved {
        let file_tokens = config.counter.count(&assembly.file_text)?;
        println!(
            "file section: {} tokens, truncated: {}",
            file_tokens,
            if assembly.file_truncated { "yes" } else { "no" }
        );
        println!("retrieval budget: {}", retrieved.budget);
        let ranking = ranking.unwrap_or_default();
        println!("ranked chunks ({}, * = admitted):", ranking.len());
        for (rank, entry) in ranking.iter().enumerate() {
            println!(
                "  {} {:>3}. {}  score {:.4}  {} tokens{}",
                if entry.admitted { "*" } else { " " },
                rank + 1,
                entry.chunk.id(),
                entry.score,
                entry.chunk.token_len,
                if entry.chunk.oversize { " (oversize)" } else { "" }
            );
        }
        println!(
            "retrieved: {} chunks, {} tokens; query truncated: {}; chunks over embedder window: {}",
            retrieved.chunks.len(),
            retrieved.total_tokens,
            if retrieved.truncated_query { "yes" } else { "no" },
            retrieved.truncated_chunks
        );
    }
    println!("prompt tokens: {}", assembly.prompt_tokens);
    if !args.no_text {
        println!("prompt:");
        println!("<<<");
        println!("{}", assembly.prompt);
        println!(">>>");
    }

    if let Some(backend) = backend {
        match backend.backend.generate(&assembly.prompt, sample) {
            Ok(raw) => {
                let prediction = first_line(&raw);
                if !args.no_text {
                    println!("prediction: {prediction}");
                    println!("target:     {}", sample.target);
                }
                println!(
                    "exact match: {}",
                    u8::from(exact_match(prediction, &sample.target))
                );
                println!(
                    "edit similarity: {:.6}",
                    edit_similarity(prediction, &sample.target)
                );
            }
            Err(e) => {
                eprintln!("backend failed: {e}");
                return Ok(2);
            }
        }
    }
    Ok(0)
}

fn cmd_prepare_finetune(args: PrepareFinetuneArgs) -> Result<i32> {
    let cfg = Overrides::load(args.base.config.as_deref())?;
    let dataset_path = args
        .dataset
        .or(cfg.path("dataset")?)
        .context("--dataset is required")?;
    let out_path = args.out.or(cfg.path("out")?).context("--out is required")?;
    let budget = args.base.budget.or(cfg.usize("budget")?).unwrap_or(10240);
    if budget < 1 {
        bail!("--budget must be at least 1");
    }
    let timeout = Duration::from_secs(
        args.base
            .timeout_secs
            .or(cfg.u64("timeout-secs")?)
            .unwrap_or(30),
    );
    let counter = resolve_counter(&args.base, &cfg, timeout)?;
    let template_name = args
        .base
        .template
        .clone()
        .or(cfg.string("template")?)
        .unwrap_or_else(|| "default-v1".to_string());
    let template: PromptTemplate = parse_from_str("--template", &template_name)?;
    let limit = args.limit.or(cfg.usize("limit")?);
    let seed = args.seed.or(cfg.u64("seed")?).unwrap_or(0);

    let dataset = load_dataset(&dataset_path, None)?;
    let samples: Vec<RepoSample> = match limit {
        Some(n) if n < dataset.samples.len() => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, dataset.samples.len(), n).into_vec();
            picked.sort_unstable();
            picked
                .into_iter()
                .map(|i| dataset.samples[i].clone())
                .collect()
        }
        _ => dataset.samples,
    };

    let outcome = prepare_ft_dataset(&samples, template, &counter, budget)?;
    export_jsonl(&outcome.samples, &out_path, args.force)?;
    for skip in &outcome.skipped {
        eprintln!("skipped {}: {}", skip.sample_id, skip.reason);
    }
    println!(
        "wrote {} fine-tune samples to {} ({} skipped)",
        outcome.samples.len(),
        out_path.display(),
        outcome.skipped.len()
    );
    Ok(if outcome.skipped.is_empty() { 0 } else { 2 })
}

/// Recursively collects Verilog-ish sources under `root`, paths relative to
/// it, sorted for determinism.
fn collect_verilog_files(root: &Path) -> Result<Vec<RepoFile>> {
    const EXTENSIONS: [&str; 4] = ["v", "sv", "vh", "svh"];
    fn walk(dir: &Path, root: &Path, out: &mut Vec<RepoFile>) -> Result<()> {
        for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, root, out)?;
            } else if path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e))
            {
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let rel = path
                    .strip_prefix(root)
                    .expect("walk stays under root")
                    .to_string_lossy()
                    .into_owned();
                out.push(RepoFile { path: rel, text });
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, root, &mut files)?;
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(files)
}

fn cmd_index(args: IndexArgs) -> Result<i32> {
    let cfg = Overrides::load(args.base.config.as_deref())?;
    let out_path = args.out.or(cfg.path("out")?).context("--out is required")?;
    let pipeline = resolve_pipeline(&args.base, &args.axis, &cfg)?;

    let files: Vec<RepoFile> = match (&args.sample_id, &args.repo_dir) {
        (Some(_), Some(_)) => bail!("--sample-id and --repo-dir are mutually exclusive"),
        (Some(id), None) => {
            let dataset_path = args
                .dataset
                .or(cfg.path("dataset")?)
                .context("--sample-id requires --dataset")?;
            let dataset = load_dataset(&dataset_path, None)?;
            dataset
                .samples
                .into_iter()
                .find(|s| &s.id == id)
                .with_context(|| format!("unknown sample id `{id}`"))?
                .context_files
        }
        (None, Some(dir)) => collect_verilog_files(dir)?,
        (None, None) => bail!("pass --sample-id (with --dataset) or --repo-dir"),
    };
    if files.is_empty() {
        bail!("nothing to index: no files found");
    }
    if out_path.exists() && !args.force {
        bail!(
            "{} already exists; pass --force to overwrite",
            out_path.display()
        );
    }

    let config = &pipeline.config;
    let chunks = make_chunks(&files, config.strategy, &config.counter)?;
    let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
    let embeddings = embed_batch(&config.embedder, &config.counter, &texts)?;
    let store = build_store(&chunks, embeddings)?;
    store.save(&out_path)?;
    println!(
        "indexed {} files into {} chunks (dim {}) -> {}",
        files.len(),
        store.len(),
        store.dim(),
        out_path.display()
    );
    Ok(0)
}

/// Parses `argv` and runs the chosen command, returning the process exit
/// code. The first element is the binary name.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Evaluate(a) => cmd_evaluate(a, &argv),
        Command::Ablate(a) => cmd_ablate(a, &argv),
        Command::Inspect(a) => cmd_inspect(a),
        Command::PrepareFinetune(a) => cmd_prepare_finetune(a),
        Command::Index(a) => cmd_index(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
