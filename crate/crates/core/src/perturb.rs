//! Negative-prompt generation by value-level and slot-level perturbation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, Dialogue, Split, SlotQuery, TaskSpec};
use crate::error::{Error, Result};
use crate::prompt::{PromptMeta, PromptTemplates, TeacherPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    ValueLevel,
    SlotLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotValue {
    pub slot: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    pub original: SlotValue,
    pub replacement: SlotValue,
    pub seed_trace: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbCounts {
    pub n_value: usize,
    pub n_slot: usize,
}

impl Default for PerturbCounts {
    fn default() -> Self {
        Self {
            n_value: 3,
            n_slot: 3,
        }
    }
}

impl PerturbCounts {
    pub fn total(&self) -> usize {
        self.n_value + self.n_slot
    }
}

/// A seeded ChaCha stream that remembers its seed for tracing.
#[derive(Debug, Clone)]
pub struct SampleRng {
    seed: u64,
    rng: ChaCha8Rng,
}

impl SampleRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Per-sample seed: SHA-256 over the root seed and the sample identifiers.
pub fn derive_seed(root: u64, dialogue_id: &str, turn: usize, slot: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for part in [dialogue_id.as_bytes(), &(turn as u64).to_le_bytes(), slot.as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Observed values per slot and observed (slot, value) pairs of one task.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PerturbationPools {
    pub values: BTreeMap<String, Vec<String>>,
    pub pairs: Vec<SlotValue>,
}

impl PerturbationPools {
    pub fn from_dialogues<'a>(dialogues: impl IntoIterator<Item = &'a Dialogue>) -> Self {
        let mut values: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for d in dialogues {
            for turn in &d.turns {
                for (slot, value) in &turn.state {
                    values.entry(slot.clone()).or_default().insert(value.clone());
                }
            }
        }
        let pairs = values
            .iter()
            .flat_map(|(slot, vs)| {
                vs.iter().map(move |v| SlotValue {
                    slot: slot.clone(),
                    value: v.clone(),
                })
            })
            .collect();
        Self {
            values: values
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
            pairs,
        }
    }

    /// Pools from the training split of `task_id` only.
    pub fn for_task(corpus: &Corpus, task_id: &str) -> Self {
        Self::from_dialogues(corpus.dialogues_of(task_id, Split::Train))
    }

    fn value_candidates(&self, slot: &str, original: &str) -> Vec<&String> {
        let lowered = original.to_lowercase();
        self.values
            .get(slot)
            .map(|vs| vs.iter().filter(|v| v.to_lowercase() != lowered).collect())
            .unwrap_or_default()
    }

    fn slot_candidates(&self, slot: &str) -> Vec<&SlotValue> {
        self.pairs.iter().filter(|p| p.slot != slot).collect()
    }
}

/// Swaps the value for a uniformly drawn different value of the same slot.
pub fn perturb_value(
    original: &SlotValue,
    pools: &PerturbationPools,
    rng: &mut SampleRng,
) -> Result<Perturbation> {
    let candidates = pools.value_candidates(&original.slot, &original.value);
    let pick = candidates.choose(&mut rng.rng).ok_or_else(|| Error::PoolExhausted {
        slot: original.slot.clone(),
        reason: "no observed value differs from the original".into(),
    })?;
    Ok(Perturbation {
        kind: PerturbationKind::ValueLevel,
        original: original.clone(),
        replacement: SlotValue {
            slot: original.slot.clone(),
            value: (*pick).clone(),
        },
        seed_trace: rng.seed,
    })
}

/// Replaces the whole pair with a uniformly drawn observed pair of another slot.
pub fn perturb_slot(
    original: &SlotValue,
    pools: &PerturbationPools,
    rng: &mut SampleRng,
) -> Result<Perturbation> {
    let candidates = pools.slot_candidates(&original.slot);
    let pick = candidates.choose(&mut rng.rng).ok_or_else(|| Error::PoolExhausted {
        slot: original.slot.clone(),
        reason: "no observed pair for another slot".into(),
    })?;
    Ok(Perturbation {
        kind: PerturbationKind::SlotLevel,
        original: original.clone(),
        replacement: (*pick).clone(),
        seed_trace: rng.seed,
    })
}

/// Draws `k` items, distinct while the pool allows and with replacement after.
fn draw<'a, T>(pool: &[&'a T], k: usize, rng: &mut ChaCha8Rng) -> Vec<&'a T> {
    if pool.is_empty() || k == 0 {
        return Vec::new();
    }
    let distinct = k.min(pool.len());
    let mut out: Vec<&T> = rand::seq::index::sample(rng, pool.len(), distinct)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    while out.len() < k {
        out.push(*pool.choose(rng).expect("non-empty"));
    }
    out
}

/// Builds the perturbed teacher prompts for one query.
///
/// Value-level replacements are distinct; any value-level shortfall is moved
/// to the slot-level count. Slot-level replacements are distinct while the
/// pool allows and repeat after that so the batch keeps its size.
pub fn make_negative_batch(
    query: &SlotQuery,
    task: &TaskSpec,
    pools: &PerturbationPools,
    counts: PerturbCounts,
    templates: &PromptTemplates,
    rng: &mut SampleRng,
) -> Result<Vec<(Perturbation, TeacherPrompt)>> {
    if counts.total() == 0 {
        return Ok(Vec::new());
    }
    let original = SlotValue {
        slot: query.schema.qualified(),
        value: query.gold.clone(),
    };
    let value_pool = pools.value_candidates(&original.slot, &original.value);
    let slot_pool: Vec<&SlotValue> = pools
        .slot_candidates(&original.slot)
        .into_iter()
        .filter(|p| task.slot(&p.slot).is_some())
        .collect();

    let value_taken = counts.n_value.min(value_pool.len());
    let slot_needed = counts.n_slot + (counts.n_value - value_taken);

    let mut perturbations = Vec::with_capacity(counts.total());
    for value in draw(&value_pool, value_taken, &mut rng.rng) {
        perturbations.push(Perturbation {
            kind: PerturbationKind::ValueLevel,
            original: original.clone(),
            replacement: SlotValue {
                slot: original.slot.clone(),
                value: value.clone(),
            },
            seed_trace: rng.seed,
        });
    }
    if !slot_pool.is_empty() {
        for pair in draw(&slot_pool, slot_needed, &mut rng.rng) {
            perturbations.push(Perturbation {
                kind: PerturbationKind::SlotLevel,
                original: original.clone(),
                replacement: pair.clone(),
                seed_trace: rng.seed,
            });
        }
    } else if !value_pool.is_empty() {
        // No other slot has observed values: repeat value-level draws instead.
        for _ in 0..slot_needed {
            let value = *value_pool.choose(&mut rng.rng).expect("non-empty");
            perturbations.push(Perturbation {
                kind: PerturbationKind::ValueLevel,
                original: original.clone(),
                replacement: SlotValue {
                    slot: original.slot.clone(),
                    value: value.clone(),
                },
                seed_trace: rng.seed,
            });
        }
    }
    if perturbations.is_empty() {
        return Err(Error::PoolExhausted {
            slot: original.slot,
            reason: "neither value-level nor slot-level replacements are available".into(),
        });
    }

    perturbations
        .into_iter()
        .map(|p| {
            let schema = task.slot(&p.replacement.slot).ok_or_else(|| {
                Error::Consistency(format!("replacement slot {} not in task", p.replacement.slot))
            })?;
            let prompt = templates.build_teacher_prompt(
                &query.context,
                schema,
                &p.replacement.value,
                PromptMeta {
                    dialogue_id: query.dialogue_id.clone(),
                    turn: query.turn,
                    qualified_slot: p.replacement.slot.clone(),
                    gold_value: p.replacement.value.clone(),
                },
            );
            Ok((p, prompt))
        })
        .collect()
}
