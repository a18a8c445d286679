use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ros_core::config::{RunConfig, DEFAULT_CONFIG_FILE};
use ros_core::corpus::{Corpus, Split};
use ros_core::distill::EmitOptions;
use ros_core::io::{atomic_write, read_json, write_json};
use ros_core::metrics::{aggregate, Report};
use ros_core::pipeline::{
    build_chat_provider, build_embedder, run_analyze, run_distill, run_emit, run_evaluate, run_ingest,
    DistillOptions, EmitRequest,
};
use ros_core::prompt::{Mode, PromptTemplates};

/// Reasoning distillation for continual dialogue state tracking.
///
/// Settings come from a `ros.toml` file, then flags, then `ROS_<KEY>`
/// environment variables (for example ROS_TEACHER_KEY), each overriding the
/// previous layer. Exit codes: 0 success, 1 hard error, 2 configuration error.
#[derive(Parser)]
#[command(name = "ros", version)]
struct Cli {
    /// Key/value config file. Defaults to ./ros.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log filter, e.g. `info` or `ros_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an SGD-layout directory into a normalized corpus.
    Ingest(IngestArgs),
    /// Generate, perturb and select teacher reasonings for long turns.
    Distill(DistillArgs),
    /// Write fine-tuning records in vanilla or rationalized layout.
    Emit(EmitArgs),
    /// Score prediction files and report Avg. JGA, FWT and BWT.
    Evaluate(EvaluateArgs),
    /// Classify wrong predictions on long dialogues.
    Analyze(AnalyzeArgs),
    /// Mean and standard error of metrics across evaluation reports.
    Aggregate(AggregateArgs),
    /// Print the effective configuration as JSON.
    ShowConfig(SettingsArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// SGD root containing train/, dev/ and test/.
    #[arg(long = "sgd-dir", alias = "sgd")]
    sgd: PathBuf,
    /// Output directory for corpus.jsonl, tasks.json and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated task ids or service names to keep (default: all).
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
}

/// Settings shared by the pipeline commands. Unset flags fall back to the
/// config file and then to the built-in defaults shown here.
#[derive(Args, Default)]
struct SettingsArgs {
    /// Teacher sampling temperature [default: 0.7]
    #[arg(long)]
    temperature: Option<f64>,
    /// Candidate reasonings per query [default: 5]
    #[arg(long)]
    g: Option<usize>,
    /// Teacher max tokens per completion [default: 256]
    #[arg(long)]
    max_tokens: Option<u32>,
    /// `n` (one request, n choices) or `independent` [default: n]
    #[arg(long)]
    sampling: Option<String>,
    /// Selection temperature [default: 0.8]
    #[arg(long)]
    tau: Option<f64>,
    /// Distance: euclidean or cosine [default: euclidean]
    #[arg(long)]
    metric: Option<String>,
    /// Positive sample: prompt, prompt-without-suffix or raw-dialogue [default: prompt]
    #[arg(long)]
    anchor: Option<String>,
    /// Value-level perturbations per query [default: 3]
    #[arg(long)]
    n_value: Option<usize>,
    /// Slot-level perturbations per query [default: 3]
    #[arg(long)]
    n_slot: Option<usize>,
    /// Root seed for all sampling [default: 42]
    #[arg(long)]
    seed: Option<u64>,
    /// Turns above this index use teacher reasonings [default: 10]
    #[arg(long)]
    turn_threshold: Option<usize>,
    /// Requests in flight [default: 4]
    #[arg(long)]
    parallelism: Option<usize>,
    /// Response cache directory [default: .ros-cache]
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Teacher provider: mock or http [default: mock]
    #[arg(long)]
    provider: Option<String>,
    /// Chat-completions endpoint (env ROS_TEACHER_URL)
    #[arg(long)]
    teacher_url: Option<String>,
    /// Teacher model name (env ROS_TEACHER_MODEL) [default: gpt-3.5-turbo]
    #[arg(long)]
    teacher_model: Option<String>,
    /// Mock reply template; `{i}` is the candidate index, `{hash}` the prompt hash
    #[arg(long)]
    mock_template: Option<String>,
    /// Embedding source: file, http or hashing [default: file]
    #[arg(long)]
    embedding: Option<String>,
    /// Precomputed embeddings, JSONL of {text_hash, vector}
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Embedding endpoint (env ROS_EMBEDDING_URL)
    #[arg(long)]
    embedding_url: Option<String>,
    /// Embedding model name [default: text-embedding-3-small]
    #[arg(long)]
    embedding_model: Option<String>,
    /// Dimension of hashing embeddings [default: 256]
    #[arg(long)]
    embedding_dim: Option<usize>,
    /// Replay memory dialogues per task [default: 50]
    #[arg(long)]
    memory_size: Option<usize>,
    /// Input character budget per record [default: 6000]
    #[arg(long)]
    max_context_chars: Option<usize>,
    /// Task order: order1..order5, a file, or a comma list [default: order1]
    #[arg(long)]
    order: Option<String>,
    /// Only errors after this turn are analyzed [default: 10]
    #[arg(long)]
    min_turn: Option<usize>,
}

impl SettingsArgs {
    fn pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let s = |v: &Option<String>| v.clone();
        let n = |v: Option<f64>| v.map(|x| x.to_string());
        let u = |v: Option<usize>| v.map(|x| x.to_string());
        let p = |v: &Option<PathBuf>| v.as_ref().map(|x| x.display().to_string());
        push("temperature", n(self.temperature));
        push("g", u(self.g));
        push("max_tokens", self.max_tokens.map(|x| x.to_string()));
        push("sampling", s(&self.sampling));
        push("tau", n(self.tau));
        push("metric", s(&self.metric));
        push("anchor", s(&self.anchor));
        push("n_value", u(self.n_value));
        push("n_slot", u(self.n_slot));
        push("seed", self.seed.map(|x| x.to_string()));
        push("turn_threshold", u(self.turn_threshold));
        push("parallelism", u(self.parallelism));
        push("cache_dir", p(&self.cache_dir));
        push("provider", s(&self.provider));
        push("teacher_url", s(&self.teacher_url));
        push("teacher_model", s(&self.teacher_model));
        push("mock_template", s(&self.mock_template));
        push("embedding", s(&self.embedding));
        push("embeddings_path", p(&self.embeddings));
        push("embedding_url", s(&self.embedding_url));
        push("embedding_model", s(&self.embedding_model));
        push("embedding_dim", u(self.embedding_dim));
        push("memory_size", u(self.memory_size));
        push("max_context_chars", u(self.max_context_chars));
        push("task_order", s(&self.order));
        push("min_turn", u(self.min_turn));
        out
    }
}

#[derive(Args)]
struct DistillArgs {
    /// Corpus directory written by `ingest`.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for selections, audit, failures and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated task ids (default: every task in the corpus).
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
    /// Corpus split to distill.
    #[arg(long, default_value = "train")]
    split: Split,
    /// Write the texts needing embeddings as JSONL {text_hash, text} and stop.
    #[arg(long)]
    export_texts: Option<PathBuf>,
    /// Directory with replacement prompt templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Exit 1 when any query failed.
    #[arg(long)]
    strict: bool,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct EmitArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output JSONL; the manifest is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// vanilla or rationalized.
    #[arg(long, default_value = "rationalized")]
    mode: Mode,
    /// Distill output directory (required in rationalized mode).
    #[arg(long)]
    selections: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
    #[arg(long, default_value = "train")]
    split: Split,
    /// Records from earlier tasks to shuffle in.
    #[arg(long)]
    replay_memory: Option<PathBuf>,
    /// Write a sampled replay memory of these tasks here.
    #[arg(long)]
    memory_out: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Directory of preds_after-{j}_on-{i}.jsonl files.
    #[arg(long)]
    preds: Option<PathBuf>,
    /// Explicit cell: J I PATH. Repeatable.
    #[arg(long, num_args = 3, value_names = ["J", "I", "PATH"])]
    cell: Vec<String>,
    /// vanilla or rationalized.
    #[arg(long, default_value = "rationalized")]
    mode: Mode,
    /// Split holding the evaluation dialogues.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Write report.json and report.txt here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Export the accuracy matrix as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// A prediction file or a directory of them.
    #[arg(long)]
    preds: PathBuf,
    #[arg(long, default_value = "rationalized")]
    mode: Mode,
    /// Write quandary.json and quandary.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct AggregateArgs {
    /// report.json files written by `evaluate --out`, e.g. one per task order.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

fn resolve_config(file: Option<&Path>, settings: &SettingsArgs) -> ros_core::Result<RunConfig> {
    let default = Path::new(DEFAULT_CONFIG_FILE);
    let file = file.or_else(|| default.is_file().then_some(default));
    RunConfig::resolve(file, &settings.pairs(), |k| std::env::var(k).ok())
}

fn templates(dir: Option<&Path>) -> ros_core::Result<PromptTemplates> {
    match dir {
        Some(d) => PromptTemplates::from_dir(d),
        None => Ok(PromptTemplates::default()),
    }
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Ingest(a) => {
            let m = run_ingest(&a.sgd, &a.tasks, &a.out)?;
            println!(
                "kept {} dialogues in {} tasks ({} multi-service dropped)",
                m.stats.dialogues_kept,
                m.tasks.len(),
                m.stats.dropped_multi_service
            );
        }
        Command::Distill(a) => {
            let cfg = resolve_config(config, &a.settings)?;
            let corpus = load_corpus(&a.corpus)?;
            let templates = templates(a.templates.as_deref())?;
            let chat = build_chat_provider(&cfg)?;
            let embedder = match a.export_texts {
                Some(_) => None,
                None => Some(build_embedder(&cfg)?),
            };
            let opts = DistillOptions {
                tasks: a.tasks,
                split: a.split,
                export_texts: a.export_texts,
            };
            let outcome = run_distill(&corpus, &cfg, &templates, chat, embedder.as_ref(), &opts, &a.out)?;
            let m = &outcome.manifest;
            match m.exported_texts {
                Some(n) => println!("exported {n} texts for embedding"),
                None => println!(
                    "{} teacher queries: {} selected, {} failed, {} perturbed prompts failed",
                    m.teacher_queries, m.selected, m.failed_queries, m.perturbed_failures
                ),
            }
            if a.strict && !outcome.failures.is_empty() {
                eprintln!("strict mode: {} failures recorded", outcome.failures.len());
                return Ok(ExitCode::from(1));
            }
        }
        Command::Emit(a) => {
            let cfg = resolve_config(config, &a.settings)?;
            let corpus = load_corpus(&a.corpus)?;
            let templates = templates(a.templates.as_deref())?;
            let req = EmitRequest {
                tasks: a.tasks,
                options: EmitOptions {
                    mode: a.mode,
                    max_context_chars: cfg.max_context_chars,
                    turn_threshold: cfg.turn_threshold,
                    split: a.split,
                },
                distill_dir: a.selections,
                replay_memory: a.replay_memory,
                memory_out: a.memory_out,
                memory_size: cfg.memory_size,
                seed: cfg.seed,
            };
            let m = run_emit(&corpus, &templates, &req, &a.out)?;
            println!(
                "wrote {} records ({} fallbacks, {} truncated)",
                m.replay.as_ref().map_or(m.emit.records, |r| r.total),
                m.emit.fallbacks,
                m.emit.truncated
            );
        }
        Command::Evaluate(a) => {
            let cfg = resolve_config(config, &a.settings)?;
            let corpus = load_corpus(&a.corpus)?;
            let mut cells = Vec::new();
            for c in a.cell.chunks(3) {
                let j = c[0].parse().with_context(|| format!("--cell J: {:?}", c[0]))?;
                let i = c[1].parse().with_context(|| format!("--cell I: {:?}", c[1]))?;
                cells.push((j, i, PathBuf::from(&c[2])));
            }
            let eval = run_evaluate(&corpus, &cfg.task_order, a.preds.as_deref(), &cells, a.split, a.mode)?;
            let table = eval.report.to_table();
            print!("{table}");
            if let Some(dir) = &a.out {
                write_json(&dir.join("report.json"), &eval)?;
                atomic_write(&dir.join("report.txt"), table.as_bytes())?;
            }
            if let Some(path) = &a.csv {
                atomic_write(path, eval.report.matrix_csv().as_bytes())?;
            }
        }
        Command::Analyze(a) => {
            let cfg = resolve_config(config, &a.settings)?;
            let corpus = load_corpus(&a.corpus)?;
            let report = run_analyze(&corpus, &a.preds, a.mode, cfg.min_turn)?;
            print!("{}", report.to_table());
            if let Some(dir) = &a.out {
                write_json(&dir.join("quandary.json"), &report)?;
                atomic_write(&dir.join("quandary.csv"), report.to_csv().as_bytes())?;
            }
        }
        Command::Aggregate(a) => {
            let reports = a
                .reports
                .iter()
                .map(|p| read_json::<Report>(p))
                .collect::<ros_core::Result<Vec<_>>>()?;
            println!("{}", serde_json::to_string_pretty(&aggregate(&reports))?);
        }
        Command::ShowConfig(settings) => {
            let cfg = resolve_config(config, &settings)?;
            println!("{}", serde_json::to_string_pretty(&cfg.manifest())?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            if let Some(ros_core::Error::Config(errs)) = e.downcast_ref::<ros_core::Error>() {
                eprintln!("configuration error:");
                for err in errs {
                    eprintln!("  - {err}");
                }
                return ExitCode::from(2);
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
