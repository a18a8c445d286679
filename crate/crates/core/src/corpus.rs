//! Schema-guided dialogue corpus: ingest, normalized storage, task orders,
//! replay-memory sampling and per-slot query construction.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Gold value used for slots that are absent from a turn's state.
pub const NONE_VALUE: &str = "NONE";

/// The fifteen single-service SGD tasks: (task id, service, slot count).
pub const SGD_TASKS: [(u32, &str, usize); 15] = [
    (30, "services_4", 5),
    (31, "flights_1", 10),
    (32, "services_3", 5),
    (33, "flights_3", 8),
    (34, "trains_1", 7),
    (35, "homes_2", 8),
    (36, "rentalcars_2", 6),
    (37, "restaurants_1", 9),
    (38, "music_1", 6),
    (39, "hotels_4", 7),
    (40, "media_2", 5),
    (41, "hotels_3", 6),
    (42, "rentalcars_3", 7),
    (43, "hotels_1", 7),
    (44, "homes_1", 7),
];

/// Builtin task orders over the task ids in [`SGD_TASKS`].
pub const BUILTIN_ORDERS: [(&str, [u32; 15]); 5] = [
    ("order1", [30, 31, 32, 33, 34, 35, 36, 37, 38, 39, 40, 41, 42, 43, 44]),
    ("order2", [39, 33, 36, 42, 40, 37, 38, 34, 32, 35, 41, 31, 30, 44, 43]),
    ("order3", [30, 41, 38, 31, 43, 39, 40, 33, 34, 44, 37, 36, 32, 35, 42]),
    ("order4", [43, 40, 44, 38, 30, 37, 31, 39, 32, 35, 41, 34, 33, 36, 42]),
    ("order5", [30, 33, 44, 31, 38, 32, 42, 40, 37, 43, 36, 39, 41, 35, 34]),
];

/// Task id for a service: the numeric id from [`SGD_TASKS`] when the service
/// is one of the fifteen, otherwise the service name itself.
pub fn task_id_for_service(service: &str) -> String {
    SGD_TASKS
        .iter()
        .find(|(_, name, _)| name.eq_ignore_ascii_case(service))
        .map(|(id, _, _)| id.to_string())
        .unwrap_or_else(|| service.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSchema {
    pub service_name: String,
    pub service_description: String,
    pub slot_name: String,
    pub slot_description: String,
}

impl SlotSchema {
    /// `service-slot`, without brackets.
    pub fn key(&self) -> String {
        format!("{}-{}", self.service_name, self.slot_name)
    }

    /// `<service-slot>`, the form used as state keys and inside prompts.
    pub fn qualified(&self) -> String {
        format!("<{}>", self.key())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    /// 1-based.
    pub index: usize,
    /// System utterance preceding the user utterance; empty when absent.
    pub system: String,
    pub user: String,
    /// Cumulative state keyed by qualified slot name.
    pub state: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub task_id: String,
    pub split: Split,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn turn(&self, t: usize) -> Option<&Turn> {
        t.checked_sub(1).and_then(|i| self.turns.get(i))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub slots: Vec<SlotSchema>,
}

impl TaskSpec {
    /// Number of slots, J.
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, qualified: &str) -> Option<&SlotSchema> {
        self.slots.iter().find(|s| s.qualified() == qualified)
    }

    pub fn service_name(&self) -> &str {
        self.slots.first().map(|s| s.service_name.as_str()).unwrap_or("")
    }

    fn validate(&self) -> Result<()> {
        if self.slots.is_empty() {
            return Err(Error::Validation(format!("task {} has no slots", self.task_id)));
        }
        let mut seen = HashSet::new();
        for s in &self.slots {
            if !seen.insert(s.qualified()) {
                return Err(Error::Validation(format!(
                    "duplicate slot {} in task {}",
                    s.qualified(),
                    self.task_id
                )));
            }
            if s.service_description.trim().is_empty() || s.slot_description.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "slot {} has an empty description",
                    s.qualified()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOrder {
    pub name: String,
    pub ordered_task_ids: Vec<String>,
}

impl TaskOrder {
    pub fn len(&self) -> usize {
        self.ordered_task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered_task_ids.is_empty()
    }

    /// Task id at 1-based position `i`.
    pub fn task_at(&self, i: usize) -> Option<&str> {
        i.checked_sub(1)
            .and_then(|idx| self.ordered_task_ids.get(idx))
            .map(String::as_str)
    }

    pub fn builtin(name: &str) -> Option<TaskOrder> {
        BUILTIN_ORDERS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(n, ids)| TaskOrder {
                name: n.to_string(),
                ordered_task_ids: ids.iter().map(|id| id.to_string()).collect(),
            })
    }

    /// Checks the order is a permutation of distinct ids and, when `known` is
    /// given, that every id resolves to a known task.
    pub fn validate(&self, known: Option<&[TaskSpec]>) -> Result<()> {
        if self.ordered_task_ids.is_empty() {
            return Err(Error::Validation(format!("task order {} is empty", self.name)));
        }
        let mut seen = HashSet::new();
        for id in &self.ordered_task_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!(
                    "task order {} lists task {id} more than once",
                    self.name
                )));
            }
            if let Some(tasks) = known {
                if !tasks.iter().any(|t| &t.task_id == id) {
                    return Err(Error::Validation(format!(
                        "task order {} references unknown task {id}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Resolves `source` as a builtin order name (`order1`..`order5`), an inline
/// comma-separated list, or a file listing task ids either as a JSON array or
/// as whitespace/comma separated tokens.
pub fn load_task_order(source: &str, known: Option<&[TaskSpec]>) -> Result<TaskOrder> {
    let inline = source.contains(',') && !Path::new(source).exists();
    let order = match TaskOrder::builtin(source) {
        Some(order) => order,
        None if inline => TaskOrder {
            name: "custom".into(),
            ordered_task_ids: parse_order_ids(source)?,
        },
        None if !Path::new(source).is_file() => {
            return Err(Error::Config(vec![format!(
                "task order {source:?} is not order1..order5, an existing file, or a comma-separated list"
            )]));
        }
        None => {
            let path = Path::new(source);
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let ids = parse_order_ids(&text).map_err(|e| match e {
                Error::Json(err) => Error::parse(path, &err),
                other => other,
            })?;
            TaskOrder {
                name: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| source.to_string()),
                ordered_task_ids: ids,
            }
        }
    };
    order.validate(known)?;
    Ok(order)
}

fn parse_order_ids(text: &str) -> Result<Vec<String>> {
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        let values: Vec<serde_json::Value> = serde_json::from_str(trimmed)?;
        values
            .into_iter()
            .map(|v| match v {
                serde_json::Value::String(s) => Ok(s),
                serde_json::Value::Number(n) => Ok(n.to_string()),
                other => Err(Error::Validation(format!("invalid task id {other}"))),
            })
            .collect()
    } else {
        Ok(trimmed
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect())
    }
}

/// A parsed corpus: task schemas plus normalized dialogues.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub tasks: Vec<TaskSpec>,
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn task(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn dialogues_of<'a>(
        &'a self,
        task_id: &'a str,
        split: Split,
    ) -> impl Iterator<Item = &'a Dialogue> + 'a {
        self.dialogues
            .iter()
            .filter(move |d| d.task_id == task_id && d.split == split)
    }

    /// Checks every corpus invariant: task schemas, consecutive 1-based turn
    /// indices, non-empty dialogues, ids unique per (task, split), and state
    /// keys drawn from the task schema.
    pub fn validate(&self) -> Result<()> {
        for task in &self.tasks {
            task.validate()?;
        }
        let mut ids = HashSet::new();
        for d in &self.dialogues {
            let task = self.task(&d.task_id).ok_or_else(|| {
                Error::Validation(format!(
                    "dialogue {} references unknown task {}",
                    d.dialogue_id, d.task_id
                ))
            })?;
            if !ids.insert((d.task_id.as_str(), d.split, d.dialogue_id.as_str())) {
                return Err(Error::Validation(format!(
                    "dialogue id {} repeated in task {} split {}",
                    d.dialogue_id, d.task_id, d.split
                )));
            }
            if d.turns.is_empty() {
                return Err(Error::Validation(format!("dialogue {} has no turns", d.dialogue_id)));
            }
            for (pos, turn) in d.turns.iter().enumerate() {
                if turn.index != pos + 1 {
                    return Err(Error::Validation(format!(
                        "dialogue {} turn {} has index {}",
                        d.dialogue_id,
                        pos + 1,
                        turn.index
                    )));
                }
                for key in turn.state.keys() {
                    if task.slot(key).is_none() {
                        return Err(Error::SchemaViolation {
                            service: task.service_name().to_string(),
                            slot: key.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes `corpus.jsonl` (one dialogue per line) and `tasks.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_jsonl(&dir.join(CORPUS_FILE), &self.dialogues)?;
        io::write_json(&dir.join(TASKS_FILE), &self.tasks)
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let corpus = Corpus {
            tasks: io::read_json(&dir.join(TASKS_FILE))?,
            dialogues: io::read_jsonl(&dir.join(CORPUS_FILE))?,
        };
        corpus.validate()?;
        Ok(corpus)
    }
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TASKS_FILE: &str = "tasks.json";

// ---------------------------------------------------------------------------
// SGD ingest

#[derive(Debug, Deserialize)]
struct SgdService {
    service_name: String,
    description: String,
    slots: Vec<SgdSlot>,
}

#[derive(Debug, Deserialize)]
struct SgdSlot {
    name: String,
    description: String,
}

#[derive(Debug, Deserialize)]
struct SgdDialogue {
    dialogue_id: String,
    services: Vec<String>,
    turns: Vec<SgdTurn>,
}

#[derive(Debug, Deserialize)]
struct SgdTurn {
    speaker: String,
    utterance: String,
    #[serde(default)]
    frames: Vec<SgdFrame>,
}

#[derive(Debug, Deserialize)]
struct SgdFrame {
    service: String,
    #[serde(default)]
    state: Option<SgdState>,
}

#[derive(Debug, Deserialize)]
struct SgdState {
    #[serde(default)]
    slot_values: BTreeMap<String, Vec<String>>,
}

/// Counters reported alongside an ingest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub dialogues_kept: usize,
    pub dropped_multi_service: usize,
    pub dropped_unselected_service: usize,
    pub dropped_no_user_turn: usize,
    pub files_read: usize,
}

/// Parses an SGD-layout directory. Service names are lowercased.
///
/// Each split lives in `<dir>/<split>/` with a `schema.json` and one or more
/// `dialogues_*.json` files; a single `<dir>/schema.json` is used for splits
/// that lack their own. Only single-service dialogues are kept. `tasks`, when
/// non-empty, restricts the result to the listed task ids or service names.
pub fn parse_sgd(dir: &Path, tasks: &[String]) -> Result<(Corpus, IngestStats)> {
    let mut stats = IngestStats::default();
    let root_schema = dir.join("schema.json");
    let mut services: BTreeMap<String, SgdService> = BTreeMap::new();
    let mut split_files: Vec<(Split, PathBuf)> = Vec::new();

    for split in Split::ALL {
        let split_dir = dir.join(split.as_str());
        if !split_dir.is_dir() {
            continue;
        }
        let schema_path = if split_dir.join("schema.json").is_file() {
            split_dir.join("schema.json")
        } else {
            root_schema.clone()
        };
        if schema_path.is_file() {
            let parsed: Vec<SgdService> = io::read_json(&schema_path)?;
            for mut service in parsed {
                service.service_name = service.service_name.to_ascii_lowercase();
                services.entry(service.service_name.clone()).or_insert(service);
            }
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&split_dir)
            .map_err(|e| Error::io(&split_dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("dialogues") && n.ends_with(".json"))
            })
            .collect();
        files.sort();
        split_files.extend(files.into_iter().map(|f| (split, f)));
    }
    if services.is_empty() && root_schema.is_file() {
        let parsed: Vec<SgdService> = io::read_json(&root_schema)?;
        for mut service in parsed {
            service.service_name = service.service_name.to_ascii_lowercase();
            services.entry(service.service_name.clone()).or_insert(service);
        }
    }
    if split_files.is_empty() {
        return Err(Error::Validation(format!(
            "no dialogues_*.json files under {}/{{train,dev,test}}",
            dir.display()
        )));
    }

    let selected = |service: &str| -> bool {
        tasks.is_empty()
            || tasks
                .iter()
                .any(|t| t == service || *t == task_id_for_service(service))
    };

    let mut task_specs: Vec<TaskSpec> = services
        .values()
        .filter(|s| selected(&s.service_name))
        .map(|s| TaskSpec {
            task_id: task_id_for_service(&s.service_name),
            slots: s
                .slots
                .iter()
                .map(|slot| SlotSchema {
                    service_name: s.service_name.clone(),
                    service_description: s.description.clone(),
                    slot_name: slot.name.clone(),
                    slot_description: slot.description.clone(),
                })
                .collect(),
        })
        .collect();
    task_specs.sort_by_key(|t| task_sort_key(&t.task_id));
    for t in &task_specs {
        t.validate()?;
    }
    for t in tasks {
        if !task_specs.iter().any(|s| &s.task_id == t || s.service_name() == t) {
            return Err(Error::Validation(format!("requested task {t} not found in schema")));
        }
    }

    let mut dialogues = Vec::new();
    for (split, file) in split_files {
        stats.files_read += 1;
        let raw: Vec<SgdDialogue> = io::read_json(&file)?;
        for d in raw {
            if d.services.len() != 1 {
                stats.dropped_multi_service += 1;
                continue;
            }
            let service = &d.services[0].to_ascii_lowercase();
            if !selected(service) {
                stats.dropped_unselected_service += 1;
                continue;
            }
            let spec = services.get(service).ok_or_else(|| {
                Error::Validation(format!(
                    "dialogue {} uses service {service} missing from schema",
                    d.dialogue_id
                ))
            })?;
            let turns = materialize_turns(&d, spec)?;
            if turns.is_empty() {
                stats.dropped_no_user_turn += 1;
                continue;
            }
            dialogues.push(Dialogue {
                dialogue_id: d.dialogue_id,
                task_id: task_id_for_service(service),
                split,
                turns,
            });
        }
    }
    if stats.dropped_multi_service > 0 {
        tracing::warn!(
            count = stats.dropped_multi_service,
            "dropped multi-service dialogues"
        );
    }
    stats.dialogues_kept = dialogues.len();
    let corpus = Corpus {
        tasks: task_specs,
        dialogues,
    };
    corpus.validate()?;
    Ok((corpus, stats))
}

fn task_sort_key(id: &str) -> (u8, u64, String) {
    match id.parse::<u64>() {
        Ok(n) => (0, n, String::new()),
        Err(_) => (1, 0, id.to_string()),
    }
}

/// Pairs each user utterance with the system utterance(s) before it and
/// replays frame updates into a cumulative state.
fn materialize_turns(d: &SgdDialogue, service: &SgdService) -> Result<Vec<Turn>> {
    let mut turns = Vec::new();
    let mut pending_system = String::new();
    let mut state: BTreeMap<String, String> = BTreeMap::new();
    for raw in &d.turns {
        match raw.speaker.as_str() {
            "SYSTEM" => {
                if !pending_system.is_empty() {
                    pending_system.push(' ');
                }
                pending_system.push_str(&raw.utterance);
            }
            "USER" => {
                for frame in raw.frames.iter().filter(|f| f.service.eq_ignore_ascii_case(&service.service_name)) {
                    let Some(frame_state) = &frame.state else {
                        continue;
                    };
                    for (slot, values) in &frame_state.slot_values {
                        if !service.slots.iter().any(|s| &s.name == slot) {
                            return Err(Error::SchemaViolation {
                                service: service.service_name.clone(),
                                slot: slot.clone(),
                            });
                        }
                        if let Some(first) = values.first() {
                            state.insert(
                                format!("<{}-{}>", service.service_name, slot),
                                first.clone(),
                            );
                        }
                    }
                }
                turns.push(Turn {
                    index: turns.len() + 1,
                    system: std::mem::take(&mut pending_system),
                    user: raw.utterance.clone(),
                    state: state.clone(),
                });
            }
            other => {
                return Err(Error::Validation(format!(
                    "dialogue {} has unknown speaker {other:?}",
                    d.dialogue_id
                )))
            }
        }
    }
    Ok(turns)
}

// ---------------------------------------------------------------------------
// Replay memory

/// Uniformly samples `min(m, pool)` distinct indices out of `pool`, returned
/// in ascending order. Deterministic for a fixed seed.
pub fn sample_indices(pool: usize, m: usize, seed: u64) -> Vec<usize> {
    if m >= pool {
        return (0..pool).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, pool, m).into_vec();
    picked.sort_unstable();
    picked
}

/// Samples up to `m` training dialogues for the replay memory of one task.
pub fn sample_memory(dialogues: &[Dialogue], m: usize, seed: u64) -> Vec<Dialogue> {
    let train: Vec<&Dialogue> = dialogues.iter().filter(|d| d.split == Split::Train).collect();
    sample_indices(train.len(), m, seed)
        .into_iter()
        .map(|i| train[i].clone())
        .collect()
}

// ---------------------------------------------------------------------------
// Slot queries

/// One `(X_t, S_j, V_j^t)` training or evaluation query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotQuery {
    pub dialogue_id: String,
    pub task_id: String,
    pub turn: usize,
    pub context: String,
    pub schema: SlotSchema,
    pub gold: String,
}

impl SlotQuery {
    pub fn qualified_slot(&self) -> String {
        self.schema.qualified()
    }
}

/// Renders turns as `[SYSTEM]: ... [USER]: ...` segments joined by single
/// spaces. Empty system utterances are omitted.
pub fn render_context(turns: &[Turn]) -> String {
    let mut segments = Vec::with_capacity(turns.len() * 2);
    for turn in turns {
        if !turn.system.is_empty() {
            segments.push(format!("[SYSTEM]: {}", turn.system));
        }
        segments.push(format!("[USER]: {}", turn.user));
    }
    segments.join(" ")
}

/// Gold value of `slot` at a turn, `NONE` when unset.
pub fn gold_value(turn: &Turn, slot: &SlotSchema) -> String {
    turn.state
        .get(&slot.qualified())
        .cloned()
        .unwrap_or_else(|| NONE_VALUE.to_string())
}

/// One query per schema slot for turn `t` (1-based). Empty if `t` is out of
/// range.
pub fn iter_slot_queries(dialogue: &Dialogue, task: &TaskSpec, t: usize) -> Vec<SlotQuery> {
    let Some(turn) = dialogue.turn(t) else {
        return Vec::new();
    };
    let context = render_context(&dialogue.turns[..t]);
    task.slots
        .iter()
        .map(|schema| SlotQuery {
            dialogue_id: dialogue.dialogue_id.clone(),
            task_id: dialogue.task_id.clone(),
            turn: t,
            context: context.clone(),
            schema: schema.clone(),
            gold: gold_value(turn, schema),
        })
        .collect()
}

/// Every distinct value observed per qualified slot, and every distinct
/// `(slot, value)` pair, in a set of dialogues.
pub fn observed_values<'a>(
    dialogues: impl IntoIterator<Item = &'a Dialogue>,
) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for d in dialogues {
        for turn in &d.turns {
            for (slot, value) in &turn.state {
                out.entry(slot.clone()).or_default().insert(value.clone());
            }
        }
    }
    out
}
