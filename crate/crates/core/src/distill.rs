//! Fine-tuning record emission in vanilla and self-rationalization layouts,
//! plus replay mixing.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{gold_value, render_context, Corpus, Dialogue, SlotSchema, Split, TaskSpec, Turn};
use crate::error::{Error, Result};
use crate::prompt::{compose_target, needs_teacher, Mode, PromptTemplates, DEFAULT_TURN_THRESHOLD};
use crate::select::{QueryKey, SelectedReasoning};

pub const DEFAULT_MAX_CONTEXT_CHARS: usize = 6000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningSource {
    TeacherSelected,
    CannedShort,
    None,
}

impl ReasoningSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TeacherSelected => "teacher_selected",
            Self::CannedShort => "canned_short",
            Self::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub dialogue_id: String,
    pub turn: usize,
    pub qualified_slot: String,
    pub task_id: String,
    pub reasoning_source: ReasoningSource,
    pub score: Option<f64>,
    /// Older turns were dropped or cut to fit the context budget.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub meta: RecordMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitOptions {
    pub mode: Mode,
    pub max_context_chars: usize,
    pub turn_threshold: usize,
    pub split: Split,
}

impl Default for EmitOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Rationalized,
            max_context_chars: DEFAULT_MAX_CONTEXT_CHARS,
            turn_threshold: DEFAULT_TURN_THRESHOLD,
            split: Split::Train,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmitManifest {
    pub mode: Mode,
    pub split: Split,
    pub max_context_chars: usize,
    pub records: usize,
    pub per_task: BTreeMap<String, usize>,
    pub per_source: BTreeMap<String, usize>,
    /// Long-turn queries emitted in vanilla layout because generation failed.
    pub fallbacks: usize,
    pub truncated: usize,
}

/// Returns the longest suffix of `turns` whose rendered input fits in
/// `budget` characters. When even the last turn alone is too long, its text
/// is cut from the front.
fn fit_context(
    turns: &[Turn],
    budget: usize,
    build: impl Fn(&str) -> String,
) -> Result<(String, bool)> {
    let len = |ctx: &str| build(ctx).chars().count();
    let overhead = len("");
    if overhead > budget {
        return Err(Error::Config(vec![format!(
            "max context chars {budget} is smaller than the prompt scaffolding ({overhead} chars)"
        )]));
    }
    for start in 0..turns.len() {
        let ctx = render_context(&turns[start..]);
        if len(&ctx) <= budget {
            return Ok((ctx, start > 0));
        }
    }
    let last = render_context(&turns[turns.len().saturating_sub(1)..]);
    let keep = budget - overhead;
    let skip = last.chars().count().saturating_sub(keep);
    Ok((last.chars().skip(skip).collect(), true))
}

struct Target {
    output: String,
    source: ReasoningSource,
    score: Option<f64>,
    fallback: bool,
}

#[allow(clippy::too_many_arguments)]
fn target_for(
    key: &QueryKey,
    gold: &str,
    schema: &SlotSchema,
    templates: &PromptTemplates,
    selections: &BTreeMap<QueryKey, SelectedReasoning>,
    failures: &BTreeSet<QueryKey>,
    opts: &EmitOptions,
) -> Result<Target> {
    let plain = Target {
        output: gold.to_string(),
        source: ReasoningSource::None,
        score: None,
        fallback: false,
    };
    if opts.mode == Mode::Vanilla {
        return Ok(plain);
    }
    if !needs_teacher(key.turn, opts.turn_threshold) {
        return Ok(Target {
            output: compose_target(&templates.short_dialogue_reasoning(schema, gold), gold),
            source: ReasoningSource::CannedShort,
            score: None,
            fallback: false,
        });
    }
    if let Some(sel) = selections.get(key) {
        return Ok(Target {
            output: compose_target(&sel.text, gold),
            source: ReasoningSource::TeacherSelected,
            score: Some(sel.score),
            fallback: false,
        });
    }
    if failures.contains(key) {
        return Ok(Target {
            fallback: true,
            ..plain
        });
    }
    Err(Error::Consistency(format!(
        "no selection or recorded failure for {} turn {} {}",
        key.dialogue_id, key.turn, key.slot
    )))
}

/// Records for one dialogue, one per (turn, slot).
pub fn dialogue_records(
    dialogue: &Dialogue,
    task: &TaskSpec,
    templates: &PromptTemplates,
    selections: &BTreeMap<QueryKey, SelectedReasoning>,
    failures: &BTreeSet<QueryKey>,
    opts: &EmitOptions,
) -> Result<Vec<(DistillRecord, bool)>> {
    let mut out = Vec::with_capacity(dialogue.turns.len() * task.slots.len());
    for (pos, turn) in dialogue.turns.iter().enumerate() {
        let history = &dialogue.turns[..=pos];
        for schema in &task.slots {
            let key = QueryKey {
                dialogue_id: dialogue.dialogue_id.clone(),
                turn: turn.index,
                slot: schema.qualified(),
            };
            let gold = gold_value(turn, schema);
            let target = target_for(&key, &gold, schema, templates, selections, failures, opts)?;
            let build = |ctx: &str| templates.build_student_prompt(ctx, schema, None, &gold).input;
            let (context, truncated) = fit_context(history, opts.max_context_chars, build)?;
            let prompt = templates.build_student_prompt(&context, schema, None, &gold);
            out.push((
                DistillRecord {
                    instruction: prompt.instruction,
                    input: prompt.input,
                    output: target.output,
                    meta: RecordMeta {
                        dialogue_id: key.dialogue_id,
                        turn: key.turn,
                        qualified_slot: key.slot,
                        task_id: dialogue.task_id.clone(),
                        reasoning_source: target.source,
                        score: target.score,
                        truncated,
                    },
                },
                target.fallback,
            ));
        }
    }
    Ok(out)
}

/// Emits one record per (dialogue, turn, slot) of the given tasks' split, in
/// corpus order.
pub fn emit_records(
    corpus: &Corpus,
    task_ids: &[String],
    templates: &PromptTemplates,
    selections: &BTreeMap<QueryKey, SelectedReasoning>,
    failures: &BTreeSet<QueryKey>,
    opts: &EmitOptions,
) -> Result<(Vec<DistillRecord>, EmitManifest)> {
    let mut manifest = EmitManifest {
        mode: opts.mode,
        split: opts.split,
        max_context_chars: opts.max_context_chars,
        ..Default::default()
    };
    let mut records = Vec::new();
    for task_id in task_ids {
        let task = corpus
            .task(task_id)
            .ok_or_else(|| Error::Validation(format!("unknown task {task_id}")))?;
        for dialogue in corpus.dialogues_of(task_id, opts.split) {
            for (record, fallback) in dialogue_records(dialogue, task, templates, selections, failures, opts)? {
                *manifest.per_task.entry(task_id.clone()).or_default() += 1;
                *manifest
                    .per_source
                    .entry(record.meta.reasoning_source.as_str().to_string())
                    .or_default() += 1;
                manifest.fallbacks += usize::from(fallback);
                manifest.truncated += usize::from(record.meta.truncated);
                records.push(record);
            }
        }
    }
    manifest.records = records.len();
    Ok((records, manifest))
}

/// Records belonging to the given dialogues, e.g. a sampled replay memory.
pub fn memory_records(records: &[DistillRecord], memory: &[Dialogue]) -> Vec<DistillRecord> {
    let ids: BTreeSet<(&str, &str)> = memory
        .iter()
        .map(|d| (d.task_id.as_str(), d.dialogue_id.as_str()))
        .collect();
    records
        .iter()
        .filter(|r| ids.contains(&(r.meta.task_id.as_str(), r.meta.dialogue_id.as_str())))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayManifest {
    pub seed: u64,
    pub new_records: usize,
    pub memory_records: usize,
    pub total: usize,
    pub memory_per_task: BTreeMap<String, usize>,
}

/// Concatenates new-task and memory records and shuffles them with `seed`.
pub fn emit_replay_mix(
    new: Vec<DistillRecord>,
    memory: Vec<DistillRecord>,
    seed: u64,
) -> (Vec<DistillRecord>, ReplayManifest) {
    let mut memory_per_task = BTreeMap::new();
    for r in &memory {
        *memory_per_task.entry(r.meta.task_id.clone()).or_default() += 1;
    }
    let manifest = ReplayManifest {
        seed,
        new_records: new.len(),
        memory_records: memory.len(),
        total: new.len() + memory.len(),
        memory_per_task,
    };
    let mut all = new;
    all.extend(memory);
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (all, manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{split_target, DEFAULT_SHORT_REASONING};

    fn schema(name: &str) -> SlotSchema {
        SlotSchema {
            service_name: "svc".into(),
            service_description: "A service".into(),
            slot_name: name.into(),
            slot_description: format!("The {name}"),
        }
    }

    fn corpus(turns: usize, slots: usize) -> Corpus {
        let task = TaskSpec {
            task_id: "t".into(),
            slots: (0..slots).map(|i| schema(&format!("s{i}"))).collect(),
        };
        let dialogue = Dialogue {
            dialogue_id: "d1".into(),
            task_id: "t".into(),
            split: Split::Train,
            turns: (1..=turns)
                .map(|i| Turn {
                    index: i,
                    system: format!("system says {i}"),
                    user: format!("user says {i}"),
                    state: [("<svc-s0>".to_string(), format!("v{i}"))].into(),
                })
                .collect(),
        };
        Corpus {
            tasks: vec![task],
            dialogues: vec![dialogue],
        }
    }

    fn selection(key: &QueryKey) -> SelectedReasoning {
        SelectedReasoning {
            key: key.clone(),
            text: format!("because {}", key.turn),
            candidate_index: 0,
            log_score: -1.0,
            score: (-1.0f64).exp(),
            n_negatives: 6,
            negative_shortfall: 0,
            audit: vec![],
        }
    }

    fn key(turn: usize, slot: &str) -> QueryKey {
        QueryKey {
            dialogue_id: "d1".into(),
            turn,
            slot: slot.into(),
        }
    }

    #[test]
    fn cardinality_is_turns_times_slots() {
        let c = corpus(2, 5);
        let opts = EmitOptions {
            mode: Mode::Vanilla,
            ..Default::default()
        };
        let (records, manifest) =
            emit_records(&c, &["t".into()], &PromptTemplates::default(), &BTreeMap::new(), &BTreeSet::new(), &opts)
                .unwrap();
        assert_eq!(records.len(), 10);
        assert_eq!(manifest.per_task["t"], 10);
        assert_eq!(records[0].output, "v1");
        assert_eq!(records[1].output, "NONE");
    }

    #[test]
    fn rationalized_layout_and_fallback() {
        let c = corpus(12, 2);
        let mut selections = BTreeMap::new();
        for t in 11..=12 {
            selections.insert(key(t, "<svc-s0>"), selection(&key(t, "<svc-s0>")));
        }
        selections.insert(key(11, "<svc-s1>"), selection(&key(11, "<svc-s1>")));
        let failures: BTreeSet<_> = [key(12, "<svc-s1>")].into();
        let (records, manifest) = emit_records(
            &c,
            &["t".into()],
            &PromptTemplates::default(),
            &selections,
            &failures,
            &EmitOptions::default(),
        )
        .unwrap();
        assert_eq!(records.len(), 24);
        let turn3 = &records[4];
        assert_eq!(turn3.meta.turn, 3);
        assert_eq!(turn3.output, format!("{DEFAULT_SHORT_REASONING}\n[VALUE] v3"));
        assert_eq!(turn3.meta.reasoning_source, ReasoningSource::CannedShort);
        let long = &records[20];
        assert_eq!((long.meta.turn, long.output.as_str()), (11, "because 11\n[VALUE] v11"));
        assert_eq!(records[23].output, "NONE");
        assert_eq!(records[23].meta.reasoning_source, ReasoningSource::None);
        assert_eq!(manifest.fallbacks, 1);
        assert_eq!(manifest.per_source["canned_short"], 20);
        assert_eq!(manifest.per_source["teacher_selected"], 3);
        for r in records.iter().filter(|r| r.meta.reasoning_source != ReasoningSource::None) {
            let (_, v) = split_target(&r.output).unwrap();
            assert!(!v.is_empty());
        }
    }

    #[test]
    fn missing_selection_is_inconsistent() {
        let c = corpus(11, 1);
        let err = emit_records(
            &c,
            &["t".into()],
            &PromptTemplates::default(),
            &BTreeMap::new(),
            &BTreeSet::new(),
            &EmitOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn truncation_drops_oldest_turns() {
        let c = corpus(30, 1);
        let opts = EmitOptions {
            mode: Mode::Vanilla,
            max_context_chars: 600,
            ..Default::default()
        };
        let (records, manifest) =
            emit_records(&c, &["t".into()], &PromptTemplates::default(), &BTreeMap::new(), &BTreeSet::new(), &opts)
                .unwrap();
        assert!(records.iter().all(|r| r.input.chars().count() <= 600));
        let last = records.last().unwrap();
        assert!(last.meta.truncated);
        assert!(last.input.contains("user says 30"));
        assert!(!last.input.contains("user says 1 "));
        assert!(manifest.truncated > 0);
        assert!(!records[0].meta.truncated);

        let tiny = EmitOptions {
            max_context_chars: 10,
            ..opts.clone()
        };
        assert!(matches!(
            emit_records(&c, &["t".into()], &PromptTemplates::default(), &BTreeMap::new(), &BTreeSet::new(), &tiny),
            Err(Error::Config(_))
        ));

        // A budget only slightly above the scaffolding cuts inside the last turn.
        let overhead = PromptTemplates::default()
            .build_student_prompt("", &schema("s0"), None, "x")
            .input
            .chars()
            .count();
        let tight = EmitOptions {
            max_context_chars: overhead + 5,
            ..opts
        };
        let (records, _) =
            emit_records(&c, &["t".into()], &PromptTemplates::default(), &BTreeMap::new(), &BTreeSet::new(), &tight)
                .unwrap();
        assert!(records.iter().all(|r| r.input.chars().count() <= overhead + 5 && r.meta.truncated));
    }

    fn numbered(n: usize, task: &str) -> Vec<DistillRecord> {
        (0..n)
            .map(|i| DistillRecord {
                instruction: "i".into(),
                input: format!("{task}{i}"),
                output: "o".into(),
                meta: RecordMeta {
                    dialogue_id: format!("d{i}"),
                    turn: 1,
                    qualified_slot: "<s-a>".into(),
                    task_id: task.into(),
                    reasoning_source: ReasoningSource::None,
                    score: None,
                    truncated: false,
                },
            })
            .collect()
    }

    #[test]
    fn replay_mix() {
        let (mixed, manifest) = emit_replay_mix(numbered(100, "new"), numbered(50, "old"), 7);
        assert_eq!(mixed.len(), 150);
        assert_eq!((manifest.new_records, manifest.memory_records), (100, 50));
        let (again, _) = emit_replay_mix(numbered(100, "new"), numbered(50, "old"), 7);
        assert_eq!(mixed, again);
        let (only_new, _) = emit_replay_mix(numbered(10, "new"), vec![], 7);
        let mut sorted: Vec<_> = only_new.iter().map(|r| r.input.clone()).collect();
        sorted.sort();
        let mut expected: Vec<_> = numbered(10, "new").into_iter().map(|r| r.input).collect();
        expected.sort();
        assert_eq!(sorted, expected);
    }
}
