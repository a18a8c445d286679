//! End-to-end stages: ingest, distill, emit, evaluate and analyze. Each stage
//! reads and writes plain files so runs can be resumed or inspected.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cache::{text_hash, ContentCache};
use crate::config::{ConfigManifest, EmbeddingKind, ProviderKind, RunConfig};
use crate::corpus::{
    iter_slot_queries, load_task_order, parse_sgd, sample_memory, Corpus, IngestStats, SlotQuery, Split,
};
use crate::distill::{emit_records, emit_replay_mix, memory_records, DistillRecord, EmitManifest, EmitOptions, ReplayManifest};
use crate::embed::{Embedder, EmbeddingProvider, FileEmbeddings, HashingEmbeddings, HttpEmbeddings};
use crate::error::{Error, Result};
use crate::http::{HttpClient, RetryPolicy};
use crate::io;
use crate::metrics::{evaluate_cell, scan_prediction_dir, AccuracyMatrix, CellResult, Prediction, Report};
use crate::perturb::{derive_seed, make_negative_batch, PerturbationPools, SampleRng};
use crate::prompt::{needs_teacher, Mode, PromptTemplates};
use crate::quandary::{error_report, QuandaryReport};
use crate::select::{select_many, AuditRow, QueryKey, SelectedReasoning, SelectionInput};
use crate::teacher::{ChatProvider, HttpChatProvider, MockProvider, QueryPrompts, TeacherGateway};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SELECTIONS_FILE: &str = "selections.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";

/// Resolves an empty task list to every task in the corpus.
fn resolve_tasks(corpus: &Corpus, tasks: &[String]) -> Result<Vec<String>> {
    if tasks.is_empty() {
        return Ok(corpus.tasks.iter().map(|t| t.task_id.clone()).collect());
    }
    for t in tasks {
        if corpus.task(t).is_none() {
            return Err(Error::Validation(format!("task {t} is not in the corpus")));
        }
    }
    Ok(tasks.to_vec())
}

// ---------------------------------------------------------------------------
// ingest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub stats: IngestStats,
    pub tasks: BTreeMap<String, TaskCounts>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub slots: usize,
    pub dialogues: BTreeMap<Split, usize>,
    pub turns: usize,
}

/// Parses an SGD directory and writes the normalized corpus to `out`.
pub fn run_ingest(sgd_dir: &Path, tasks: &[String], out: &Path) -> Result<IngestManifest> {
    let (corpus, stats) = parse_sgd(sgd_dir, tasks)?;
    corpus.validate()?;
    corpus.save(out)?;
    let mut counts: BTreeMap<String, TaskCounts> = corpus
        .tasks
        .iter()
        .map(|t| {
            (
                t.task_id.clone(),
                TaskCounts {
                    slots: t.slot_count(),
                    ..Default::default()
                },
            )
        })
        .collect();
    for d in &corpus.dialogues {
        let c = counts.entry(d.task_id.clone()).or_default();
        *c.dialogues.entry(d.split).or_default() += 1;
        c.turns += d.turns.len();
    }
    let manifest = IngestManifest { stats, tasks: counts };
    io::write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// providers

pub fn build_chat_provider(cfg: &RunConfig) -> Result<Arc<dyn ChatProvider>> {
    Ok(match cfg.provider {
        ProviderKind::Mock => Arc::new(MockProvider {
            template: cfg.mock_template.clone(),
        }),
        ProviderKind::Http => {
            let url = cfg
                .teacher_url
                .clone()
                .ok_or_else(|| Error::Config(vec!["provider http needs a teacher URL".into()]))?;
            Arc::new(HttpChatProvider::new(url, cfg.teacher_key.clone()))
        }
    })
}

pub fn build_embedder(cfg: &RunConfig) -> Result<Embedder> {
    let provider: Arc<dyn EmbeddingProvider> = match cfg.embedding {
        EmbeddingKind::File => {
            let path = cfg.embeddings_path.as_ref().ok_or_else(|| {
                Error::Config(vec![
                    "embedding file needs --embeddings PATH (export the texts first with --export-texts)".into(),
                ])
            })?;
            Arc::new(FileEmbeddings::load(path)?)
        }
        EmbeddingKind::Http => {
            let url = cfg
                .embedding_url
                .clone()
                .ok_or_else(|| Error::Config(vec!["embedding http needs an endpoint URL".into()]))?;
            Arc::new(HttpEmbeddings::with_client(
                url,
                cfg.embedding_key.clone(),
                cfg.embedding_model.clone(),
                HttpClient::new(Duration::from_secs(120), RetryPolicy::default()),
            ))
        }
        EmbeddingKind::Hashing => Arc::new(HashingEmbeddings { dim: cfg.embedding_dim }),
    };
    Ok(Embedder::new(provider)
        .with_cache(ContentCache::new(cfg.cache_dir.join("embeddings")))
        .with_parallelism(cfg.parallelism))
}

// ---------------------------------------------------------------------------
// distill

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureStage {
    Perturb,
    Positive,
    Perturbed,
    Select,
}

/// A generation or selection problem. `fatal` failures leave the query
/// without a selected reasoning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub dialogue_id: String,
    pub turn: usize,
    pub slot: String,
    pub task_id: String,
    pub stage: FailureStage,
    pub fatal: bool,
    pub error: String,
}

impl FailureRecord {
    pub fn key(&self) -> QueryKey {
        QueryKey {
            dialogue_id: self.dialogue_id.clone(),
            turn: self.turn,
            slot: self.slot.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillManifest {
    pub config: ConfigManifest,
    pub tasks: Vec<String>,
    pub split: Split,
    pub teacher: String,
    /// Queries past the turn threshold, which need a teacher reasoning.
    pub teacher_queries: usize,
    pub selected: usize,
    pub failed_queries: usize,
    pub perturbed_failures: usize,
    pub negative_shortfall: usize,
    /// Set when the run stopped after exporting texts for offline embedding.
    pub exported_texts: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct DistillOptions {
    pub tasks: Vec<String>,
    pub split: Split,
    /// Write the texts that need embeddings here and stop before selection.
    pub export_texts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRow {
    pub text_hash: String,
    pub text: String,
}

pub struct DistillOutcome {
    pub manifest: DistillManifest,
    pub failures: Vec<FailureRecord>,
}

struct Planned {
    query: SlotQuery,
    prompts: QueryPrompts,
}

/// Teacher queries (turn past the threshold) of the given tasks, with their
/// positive and perturbed prompts. Perturbation failures are returned as
/// fatal failure records.
fn plan_queries(
    corpus: &Corpus,
    tasks: &[String],
    split: Split,
    cfg: &RunConfig,
    templates: &PromptTemplates,
) -> Result<(Vec<Planned>, Vec<FailureRecord>)> {
    let mut planned = Vec::new();
    let mut failures = Vec::new();
    for task_id in tasks {
        let task = corpus.task(task_id).expect("resolved task");
        let pools = PerturbationPools::for_task(corpus, task_id);
        for dialogue in corpus.dialogues_of(task_id, split) {
            for turn in dialogue.turns.iter().filter(|t| needs_teacher(t.index, cfg.turn_threshold)) {
                for query in iter_slot_queries(dialogue, task, turn.index) {
                    let slot = query.qualified_slot();
                    let mut rng = SampleRng::new(derive_seed(cfg.seed, &query.dialogue_id, query.turn, &slot));
                    match make_negative_batch(&query, task, &pools, cfg.perturb, templates, &mut rng) {
                        Ok(batch) => planned.push(Planned {
                            prompts: QueryPrompts {
                                positive: templates.teacher_prompt_for(&query),
                                perturbed: batch.into_iter().map(|(_, p)| p).collect(),
                            },
                            query,
                        }),
                        Err(e) => failures.push(FailureRecord {
                            dialogue_id: query.dialogue_id.clone(),
                            turn: query.turn,
                            slot,
                            task_id: task_id.clone(),
                            stage: FailureStage::Perturb,
                            fatal: true,
                            error: e.to_string(),
                        }),
                    }
                }
            }
        }
    }
    Ok((planned, failures))
}

/// Generates, scores and selects a reasoning for every long-turn query.
///
/// Writes `selections.jsonl`, `audit.jsonl`, `failures.jsonl` and
/// `manifest.json` into `out`. Per-query failures are recorded and do not
/// abort the run.
pub fn run_distill(
    corpus: &Corpus,
    cfg: &RunConfig,
    templates: &PromptTemplates,
    chat: Arc<dyn ChatProvider>,
    embedder: Option<&Embedder>,
    opts: &DistillOptions,
    out: &Path,
) -> Result<DistillOutcome> {
    let tasks = resolve_tasks(corpus, &opts.tasks)?;
    let (planned, mut failures) = plan_queries(corpus, &tasks, opts.split, cfg, templates)?;
    let teacher_queries = planned.len() + failures.len();

    let gateway = TeacherGateway::new(chat.clone(), cfg.teacher_model.clone())
        .with_cache(ContentCache::new(cfg.cache_dir.join("teacher")));
    let prompts: Vec<QueryPrompts> = planned.iter().map(|p| p.prompts.clone()).collect();
    let sets = gateway.generate_batch(&prompts, &cfg.generation, cfg.parallelism);

    let failure = |q: &SlotQuery, stage, fatal, error: String| FailureRecord {
        dialogue_id: q.dialogue_id.clone(),
        turn: q.turn,
        slot: q.qualified_slot(),
        task_id: q.task_id.clone(),
        stage,
        fatal,
        error,
    };
    let mut inputs = Vec::new();
    let mut input_tasks = Vec::new();
    for (plan, set) in planned.iter().zip(sets) {
        match set {
            Ok(set) => {
                for e in &set.perturbed_failures {
                    failures.push(failure(&plan.query, FailureStage::Perturbed, false, e.clone()));
                }
                input_tasks.push(plan.query.task_id.clone());
                inputs.push(SelectionInput {
                    key: QueryKey::of(&plan.query),
                    positive_text: cfg.selection.anchor.text(templates, &plan.query),
                    candidates: set.positives,
                    perturbed: set.perturbed,
                });
            }
            Err(e) => failures.push(failure(&plan.query, FailureStage::Positive, true, e.to_string())),
        }
    }
    let perturbed_failures = failures.iter().filter(|f| !f.fatal).count();
    let mut manifest = DistillManifest {
        config: cfg.manifest(),
        tasks: tasks.clone(),
        split: opts.split,
        teacher: chat.id(),
        teacher_queries,
        selected: 0,
        failed_queries: 0,
        perturbed_failures,
        negative_shortfall: 0,
        exported_texts: None,
    };

    if let Some(path) = &opts.export_texts {
        let mut seen = HashSet::new();
        let mut rows = Vec::new();
        for input in &inputs {
            let texts = std::iter::once(&input.positive_text)
                .chain(input.candidates.iter().map(|c| &c.text))
                .chain(input.perturbed.iter().map(|c| &c.text));
            for text in texts {
                let h = text_hash(text);
                if seen.insert(h.clone()) {
                    rows.push(TextRow {
                        text_hash: h,
                        text: text.clone(),
                    });
                }
            }
        }
        io::write_jsonl(path, &rows)?;
        manifest.exported_texts = Some(rows.len());
        manifest.failed_queries = failures.iter().filter(|f| f.fatal).count();
        sort_failures(&mut failures);
        io::write_jsonl(&out.join(FAILURES_FILE), &failures)?;
        io::write_json(&out.join(MANIFEST_FILE), &manifest)?;
        return Ok(DistillOutcome { manifest, failures });
    }

    let embedder = embedder.ok_or_else(|| Error::Config(vec!["distill needs an embedding provider".into()]))?;
    let mut selections: Vec<SelectedReasoning> = Vec::new();
    let results = select_many(&inputs, embedder, &cfg.selection)?;
    for ((input, task_id), result) in inputs.iter().zip(&input_tasks).zip(results) {
        match result {
            Ok(sel) => selections.push(sel),
            Err(e) => failures.push(FailureRecord {
                dialogue_id: input.key.dialogue_id.clone(),
                turn: input.key.turn,
                slot: input.key.slot.clone(),
                task_id: task_id.clone(),
                stage: FailureStage::Select,
                fatal: true,
                error: e.to_string(),
            }),
        }
    }
    let audit: Vec<AuditRow> = selections.iter().flat_map(|s| s.audit_rows()).collect();
    sort_failures(&mut failures);
    manifest.selected = selections.len();
    manifest.failed_queries = failures.iter().filter(|f| f.fatal).count();
    manifest.negative_shortfall = selections.iter().map(|s| s.negative_shortfall).sum();

    io::write_jsonl(&out.join(SELECTIONS_FILE), &selections)?;
    io::write_jsonl(&out.join(AUDIT_FILE), &audit)?;
    io::write_jsonl(&out.join(FAILURES_FILE), &failures)?;
    io::write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(DistillOutcome { manifest, failures })
}

fn sort_failures(failures: &mut [FailureRecord]) {
    failures.sort_by(|a, b| {
        (&a.task_id, &a.dialogue_id, a.turn, &a.slot).cmp(&(&b.task_id, &b.dialogue_id, b.turn, &b.slot))
    });
}

/// Reads the selections and fatal failures written by [`run_distill`].
pub fn load_distill_dir(dir: &Path) -> Result<(BTreeMap<QueryKey, SelectedReasoning>, BTreeSet<QueryKey>)> {
    let selections_path = dir.join(SELECTIONS_FILE);
    let selections: Vec<SelectedReasoning> = if selections_path.is_file() {
        io::read_jsonl(&selections_path)?
    } else {
        Vec::new()
    };
    let failures_path = dir.join(FAILURES_FILE);
    let failures: Vec<FailureRecord> = if failures_path.is_file() {
        io::read_jsonl(&failures_path)?
    } else {
        Vec::new()
    };
    Ok((
        selections.into_iter().map(|s| (s.key.clone(), s)).collect(),
        failures.iter().filter(|f| f.fatal).map(FailureRecord::key).collect(),
    ))
}

// ---------------------------------------------------------------------------
// emit

#[derive(Debug, Clone, Default)]
pub struct EmitRequest {
    pub tasks: Vec<String>,
    pub options: EmitOptions,
    /// Directory written by `run_distill`; required in rationalized mode.
    pub distill_dir: Option<PathBuf>,
    /// Records from earlier tasks to mix in.
    pub replay_memory: Option<PathBuf>,
    /// Where to write this run's sampled replay memory.
    pub memory_out: Option<PathBuf>,
    pub memory_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitRunManifest {
    #[serde(flatten)]
    pub emit: EmitManifest,
    pub replay: Option<ReplayManifest>,
    pub memory_out: Option<MemoryManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryManifest {
    pub memory_size: usize,
    pub dialogues: BTreeMap<String, usize>,
    pub records: usize,
}

/// `records.jsonl` -> `records.manifest.json`.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("records");
    out.with_file_name(format!("{stem}.manifest.json"))
}

/// Writes fine-tuning records to `out` and a manifest alongside.
pub fn run_emit(
    corpus: &Corpus,
    templates: &PromptTemplates,
    req: &EmitRequest,
    out: &Path,
) -> Result<EmitRunManifest> {
    let tasks = resolve_tasks(corpus, &req.tasks)?;
    let (selections, failures) = match (&req.distill_dir, req.options.mode) {
        (Some(dir), _) => load_distill_dir(dir)?,
        (None, Mode::Vanilla) => Default::default(),
        (None, Mode::Rationalized) => {
            return Err(Error::Config(vec![
                "rationalized mode needs --selections DIR from a distill run".into(),
            ]))
        }
    };
    let (records, emit) = emit_records(corpus, &tasks, templates, &selections, &failures, &req.options)?;

    let memory_out = match &req.memory_out {
        Some(path) => {
            let mut dialogues = BTreeMap::new();
            let mut sampled = Vec::new();
            for task_id in &tasks {
                let pool: Vec<_> = corpus.dialogues_of(task_id, Split::Train).cloned().collect();
                let picked = sample_memory(&pool, req.memory_size, derive_seed(req.seed, "memory", 0, task_id));
                dialogues.insert(task_id.clone(), picked.len());
                sampled.extend(picked);
            }
            let memory = memory_records(&records, &sampled);
            io::write_jsonl(path, &memory)?;
            Some(MemoryManifest {
                memory_size: req.memory_size,
                dialogues,
                records: memory.len(),
            })
        }
        None => None,
    };

    let (records, replay) = match &req.replay_memory {
        Some(path) => {
            let memory: Vec<DistillRecord> = io::read_jsonl(path)?;
            let (mixed, manifest) = emit_replay_mix(records, memory, req.seed);
            (mixed, Some(manifest))
        }
        None => (records, None),
    };
    io::write_jsonl(out, &records)?;
    let manifest = EmitRunManifest {
        emit,
        replay,
        memory_out,
    };
    io::write_json(&manifest_path_for(out), &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub j: usize,
    pub i: usize,
    pub task_id: String,
    pub file: String,
    #[serde(flatten)]
    pub result: CellResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: Mode,
    pub split: Split,
    #[serde(flatten)]
    pub report: Report,
    pub cells: Vec<CellReport>,
}

/// Scores every prediction file against the `split` dialogues of its task
/// and assembles the accuracy matrix. Files come from `preds_dir` by naming
/// convention, then `explicit` cells override them.
pub fn run_evaluate(
    corpus: &Corpus,
    order_source: &str,
    preds_dir: Option<&Path>,
    explicit: &[(usize, usize, PathBuf)],
    split: Split,
    mode: Mode,
) -> Result<EvaluationReport> {
    let order = load_task_order(order_source, Some(&corpus.tasks))?;
    let mut files: BTreeMap<(usize, usize), PathBuf> = match preds_dir {
        Some(dir) => scan_prediction_dir(dir)?,
        None => BTreeMap::new(),
    };
    for (j, i, path) in explicit {
        files.insert((*j, *i), path.clone());
    }
    let mut matrix = AccuracyMatrix::new(order.ordered_task_ids.clone());
    let mut cells = Vec::new();
    for ((j, i), path) in files {
        let task_id = order
            .task_at(i)
            .ok_or_else(|| Error::Validation(format!("{}: task position {i} outside the order", path.display())))?
            .to_string();
        let task = corpus.task(&task_id).expect("order validated against corpus");
        let test: Vec<_> = corpus.dialogues_of(&task_id, split).collect();
        let preds: Vec<Prediction> = io::read_jsonl(&path)?;
        let result = evaluate_cell(&preds, &test, task, mode)?;
        matrix.set(j, i, result.jga)?;
        cells.push(CellReport {
            j,
            i,
            task_id,
            file: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            result,
        });
    }
    Ok(EvaluationReport {
        mode,
        split,
        report: Report::from_matrix(matrix),
        cells,
    })
}

// ---------------------------------------------------------------------------
// analyze

/// Reads one prediction file, or every `*.jsonl` file in a directory.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            out.extend(io::read_jsonl::<Prediction>(&f)?);
        }
        Ok(out)
    } else {
        io::read_jsonl(path)
    }
}

pub fn run_analyze(corpus: &Corpus, preds: &Path, mode: Mode, min_turn: usize) -> Result<QuandaryReport> {
    Ok(error_report(&read_predictions(preds)?, corpus, mode, min_turn))
}
