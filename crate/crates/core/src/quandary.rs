//! Value-selection error analysis: gold value trajectories, classification
//! of wrong predictions, and per-slot error rates.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{gold_value, Corpus, Dialogue, SlotSchema, Split};
use crate::metrics::{extract_answer, normalize_value, Prediction};
use crate::prompt::Mode;

pub const DEFAULT_MIN_TURN: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryEvent {
    pub turn: usize,
    pub value: String,
}

/// Turns at which a slot's gold value was first set or changed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueTrajectory {
    pub qualified_slot: String,
    pub events: Vec<TrajectoryEvent>,
}

/// Records an event whenever the gold value differs (after normalization)
/// from the last recorded one. Unsetting a slot is not an event.
pub fn build_trajectory(dialogue: &Dialogue, qualified_slot: &str) -> ValueTrajectory {
    let mut events: Vec<TrajectoryEvent> = Vec::new();
    for turn in &dialogue.turns {
        if let Some(v) = turn.state.get(qualified_slot) {
            let changed = events
                .last()
                .is_none_or(|e| normalize_value(&e.value) != normalize_value(v));
            if changed {
                events.push(TrajectoryEvent {
                    turn: turn.index,
                    value: v.clone(),
                });
            }
        }
    }
    ValueTrajectory {
        qualified_slot: qualified_slot.to_string(),
        events,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Prediction is the value set most recently before the evaluated turn.
    Recency,
    /// Prediction is an earlier value that had already been superseded.
    Stale,
    Other,
    /// The slot had at most one value up to the evaluated turn.
    NotQuandary,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 4] = [
        ErrorKind::Recency,
        ErrorKind::Stale,
        ErrorKind::Other,
        ErrorKind::NotQuandary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Recency => "recency",
            ErrorKind::Stale => "stale",
            ErrorKind::Other => "other",
            ErrorKind::NotQuandary => "not_quandary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorClassification {
    pub kind: ErrorKind,
    /// Trajectory values known at the evaluated turn.
    pub candidate_values: Vec<String>,
    pub matched_event: Option<TrajectoryEvent>,
}

/// Classifies a prediction at turn `turn`. `None` when the prediction is
/// correct. Only events at or before `turn` are considered.
pub fn classify_error(
    prediction: &str,
    gold: &str,
    trajectory: &ValueTrajectory,
    turn: usize,
) -> Option<ErrorClassification> {
    let pred = normalize_value(prediction);
    if pred == normalize_value(gold) {
        return None;
    }
    let known: Vec<&TrajectoryEvent> = trajectory.events.iter().filter(|e| e.turn <= turn).collect();
    let candidate_values = known.iter().map(|e| e.value.clone()).collect();
    let classified = |kind, matched: Option<&TrajectoryEvent>| {
        Some(ErrorClassification {
            kind,
            candidate_values,
            matched_event: matched.cloned(),
        })
    };
    if known.len() <= 1 {
        return classified(ErrorKind::NotQuandary, None);
    }
    let before: Vec<&TrajectoryEvent> = known.iter().copied().filter(|e| e.turn < turn).collect();
    if let Some(last) = before.last() {
        if normalize_value(&last.value) == pred {
            return classified(ErrorKind::Recency, Some(last));
        }
    }
    // Superseded: some later event at or before `turn` replaced it.
    let superseded = &known[..known.len() - 1];
    if let Some(hit) = superseded.iter().find(|e| normalize_value(&e.value) == pred) {
        return classified(ErrorKind::Stale, Some(hit));
    }
    classified(ErrorKind::Other, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotErrorRate {
    pub slot: String,
    pub predictions: usize,
    pub errors: usize,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindCount {
    pub kind: ErrorKind,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub dialogue_id: String,
    pub turn: usize,
    pub slot: String,
    pub prediction: String,
    pub gold: String,
    pub classification: ErrorClassification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuandaryReport {
    pub min_turn: usize,
    /// Predictions with `turn > min_turn` that matched a gold query.
    pub evaluated: usize,
    /// Predictions naming an unknown dialogue, turn or slot.
    pub unmatched: usize,
    pub slot_error_rates: Vec<SlotErrorRate>,
    pub histogram: Vec<KindCount>,
    pub errors: Vec<ErrorRecord>,
}

/// Classifies every wrong prediction with `turn > min_turn` against the
/// corpus gold states. Test-split dialogues take precedence when ids repeat
/// across splits.
pub fn error_report(
    predictions: &[Prediction],
    corpus: &Corpus,
    mode: Mode,
    min_turn: usize,
) -> QuandaryReport {
    let mut dialogues: HashMap<&str, &Dialogue> = HashMap::new();
    for split in [Split::Train, Split::Dev, Split::Test] {
        for d in corpus.dialogues.iter().filter(|d| d.split == split) {
            dialogues.insert(&d.dialogue_id, d);
        }
    }
    let schema_of = |d: &Dialogue, slot: &str| -> Option<SlotSchema> {
        corpus.task(&d.task_id)?.slot(slot).cloned()
    };

    let mut per_slot: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut trajectories: HashMap<(&str, &str), ValueTrajectory> = HashMap::new();
    let mut errors = Vec::new();
    let (mut evaluated, mut unmatched) = (0, 0);

    for p in predictions {
        let found = dialogues.get(p.dialogue_id.as_str()).and_then(|d| {
            let turn = d.turn(p.turn)?;
            Some((*d, turn, schema_of(d, &p.slot)?))
        });
        let Some((dialogue, turn, schema)) = found else {
            unmatched += 1;
            continue;
        };
        if p.turn <= min_turn {
            continue;
        }
        evaluated += 1;
        let gold = gold_value(turn, &schema);
        let value = extract_answer(&p.output, mode).value;
        let entry = per_slot.entry(p.slot.clone()).or_default();
        entry.0 += 1;
        let trajectory = trajectories
            .entry((dialogue.dialogue_id.as_str(), p.slot.as_str()))
            .or_insert_with(|| build_trajectory(dialogue, &p.slot));
        if let Some(classification) = classify_error(&value, &gold, trajectory, p.turn) {
            entry.1 += 1;
            errors.push(ErrorRecord {
                dialogue_id: p.dialogue_id.clone(),
                turn: p.turn,
                slot: p.slot.clone(),
                prediction: value,
                gold,
                classification,
            });
        }
    }

    let mut slot_error_rates: Vec<SlotErrorRate> = per_slot
        .into_iter()
        .filter(|(_, (_, e))| *e > 0)
        .map(|(slot, (n, e))| SlotErrorRate {
            slot,
            predictions: n,
            errors: e,
            error_rate: e as f64 / n as f64,
        })
        .collect();
    slot_error_rates.sort_by(|a, b| b.error_rate.total_cmp(&a.error_rate).then(a.slot.cmp(&b.slot)));

    let histogram = if errors.is_empty() {
        Vec::new()
    } else {
        ErrorKind::ALL
            .iter()
            .map(|&kind| {
                let count = errors.iter().filter(|e| e.classification.kind == kind).count();
                KindCount {
                    kind,
                    count,
                    percent: 100.0 * count as f64 / errors.len() as f64,
                }
            })
            .collect()
    };
    errors.sort_by(|a, b| {
        (&a.dialogue_id, a.turn, &a.slot).cmp(&(&b.dialogue_id, b.turn, &b.slot))
    });

    QuandaryReport {
        min_turn,
        evaluated,
        unmatched,
        slot_error_rates,
        histogram,
        errors,
    }
}

impl QuandaryReport {
    /// Two CSV sections: per-slot error rates, then the histogram.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slot,predictions,errors,error_rate\n");
        for r in &self.slot_error_rates {
            let _ = writeln!(out, "{},{},{},{}", r.slot, r.predictions, r.errors, r.error_rate);
        }
        out.push_str("\nkind,count,percent\n");
        for h in &self.histogram {
            let _ = writeln!(out, "{},{},{}", h.kind.as_str(), h.count, h.percent);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} predictions after turn {}, {} errors, {} unmatched",
            self.evaluated,
            self.min_turn,
            self.errors.len(),
            self.unmatched
        );
        for h in &self.histogram {
            let _ = writeln!(out, "  {:<13} {:>6} {:>7.2}%", h.kind.as_str(), h.count, h.percent);
        }
        for r in &self.slot_error_rates {
            let _ = writeln!(out, "  {:<40} {:>6.4} ({}/{})", r.slot, r.error_rate, r.errors, r.predictions);
        }
        out
    }
}
