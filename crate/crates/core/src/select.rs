//! Contrastive reasoning selection: each candidate is scored by its distance
//! to the dialogue-centric positive relative to the perturbed negatives, and
//! the lowest score wins.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::SlotQuery;
use crate::embed::{Embedder, EmbeddingVector, Metric};
use crate::error::{Error, Result};
use crate::prompt::PromptTemplates;
use crate::teacher::ReasoningCandidate;

/// Which text stands in for the positive sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositiveAnchor {
    /// The full dialogue-centric teacher prompt.
    #[default]
    Prompt,
    /// The teacher prompt without the multi-value resolution paragraph.
    PromptWithoutSuffix,
    /// The rendered dialogue context alone.
    RawDialogue,
}

impl fmt::Display for PositiveAnchor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Prompt => "prompt",
            Self::PromptWithoutSuffix => "prompt-without-suffix",
            Self::RawDialogue => "raw-dialogue",
        })
    }
}

impl FromStr for PositiveAnchor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt" => Ok(Self::Prompt),
            "prompt-without-suffix" => Ok(Self::PromptWithoutSuffix),
            "raw-dialogue" => Ok(Self::RawDialogue),
            other => Err(Error::Validation(format!(
                "unknown positive anchor {other:?} (expected prompt, prompt-without-suffix or raw-dialogue)"
            ))),
        }
    }
}

impl PositiveAnchor {
    pub fn text(self, templates: &PromptTemplates, query: &SlotQuery) -> String {
        match self {
            Self::Prompt => templates.teacher_text(&query.context, &query.schema, &query.gold, true).1,
            Self::PromptWithoutSuffix => {
                templates.teacher_text(&query.context, &query.schema, &query.gold, false).1
            }
            Self::RawDialogue => query.context.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub tau: f64,
    pub metric: Metric,
    /// Positive candidates per query.
    pub g: usize,
    /// Perturbed negatives per query.
    pub n: usize,
    pub anchor: PositiveAnchor,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            tau: 0.8,
            metric: Metric::Euclidean,
            g: 5,
            n: 6,
            anchor: PositiveAnchor::Prompt,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            errs.push(format!("tau must be > 0, got {}", self.tau));
        }
        if self.g == 0 {
            errs.push("g must be >= 1".into());
        }
        if self.n == 0 {
            errs.push("n (perturbed negatives) must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Numerically stable `ln Σ exp(x)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    /// `d_pos/τ − logsumexp(d_neg/τ)`.
    pub log_score: f64,
    /// `exp(log_score)`.
    pub score: f64,
}

/// Score from precomputed distances.
pub fn score_distances(d_positive: f64, d_negatives: &[f64], tau: f64) -> Result<Score> {
    if d_negatives.is_empty() {
        return Err(Error::Selection("no negatives to score against".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Numerical(format!("tau must be positive, got {tau}")));
    }
    if !d_positive.is_finite() || d_negatives.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numerical("non-finite distance".into()));
    }
    let scaled: Vec<f64> = d_negatives.iter().map(|d| d / tau).collect();
    let log_score = d_positive / tau - logsumexp(&scaled);
    Ok(Score {
        log_score,
        score: log_score.exp(),
    })
}

/// Distances and score of one candidate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub d_positive: f64,
    pub d_negatives: Vec<f64>,
    pub score: Score,
}

pub fn score(
    candidate: &EmbeddingVector,
    positive: &EmbeddingVector,
    negatives: &[EmbeddingVector],
    config: &SelectionConfig,
) -> Result<Scored> {
    let d_positive = config.metric.distance(candidate, positive)?;
    let d_negatives = negatives
        .iter()
        .map(|n| config.metric.distance(candidate, n))
        .collect::<Result<Vec<_>>>()?;
    let score = score_distances(d_positive, &d_negatives, config.tau)?;
    Ok(Scored {
        d_positive,
        d_negatives,
        score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate: ReasoningCandidate,
    pub d_positive: f64,
    pub d_negatives: Vec<f64>,
    pub log_score: f64,
    pub score: f64,
    pub selected: bool,
}

/// Picks the candidate with the lowest score; ties go to the lowest
/// `candidate_index`. Returns the position of the winner in `candidates`
/// together with the full audit.
pub fn select(
    candidates: &[(ReasoningCandidate, EmbeddingVector)],
    positive: &EmbeddingVector,
    negatives: &[EmbeddingVector],
    config: &SelectionConfig,
) -> Result<(usize, Vec<ScoredCandidate>)> {
    if candidates.is_empty() {
        return Err(Error::Selection("no candidates".into()));
    }
    let mut audit = candidates
        .iter()
        .map(|(cand, vec)| {
            let s = score(vec, positive, negatives, config)?;
            Ok(ScoredCandidate {
                candidate: cand.clone(),
                d_positive: s.d_positive,
                d_negatives: s.d_negatives,
                log_score: s.score.log_score,
                score: s.score.score,
                selected: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let chosen = (0..audit.len())
        .min_by(|&a, &b| {
            audit[a]
                .log_score
                .total_cmp(&audit[b].log_score)
                .then(audit[a].candidate.candidate_index.cmp(&audit[b].candidate.candidate_index))
        })
        .expect("non-empty");
    audit[chosen].selected = true;
    Ok((chosen, audit))
}

/// Identifies a `(dialogue, turn, slot)` query across artifacts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QueryKey {
    pub dialogue_id: String,
    pub turn: usize,
    pub slot: String,
}

impl QueryKey {
    pub fn of(query: &SlotQuery) -> Self {
        Self {
            dialogue_id: query.dialogue_id.clone(),
            turn: query.turn,
            slot: query.qualified_slot(),
        }
    }
}

/// Everything needed to select a reasoning for one query.
#[derive(Debug, Clone)]
pub struct SelectionInput {
    pub key: QueryKey,
    pub positive_text: String,
    pub candidates: Vec<ReasoningCandidate>,
    pub perturbed: Vec<ReasoningCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedReasoning {
    #[serde(flatten)]
    pub key: QueryKey,
    pub text: String,
    pub candidate_index: usize,
    pub log_score: f64,
    pub score: f64,
    /// Negatives actually scored against.
    pub n_negatives: usize,
    /// Configured negatives that were unavailable.
    pub negative_shortfall: usize,
    #[serde(skip)]
    pub audit: Vec<ScoredCandidate>,
}

/// One audit line per scored candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub dialogue_id: String,
    pub turn: usize,
    pub slot: String,
    pub candidate_index: usize,
    pub d_positive: f64,
    pub d_negatives: Vec<f64>,
    pub score: f64,
    pub log_score: f64,
    pub selected: bool,
}

impl SelectedReasoning {
    pub fn audit_rows(&self) -> Vec<AuditRow> {
        self.audit
            .iter()
            .map(|s| AuditRow {
                dialogue_id: self.key.dialogue_id.clone(),
                turn: self.key.turn,
                slot: self.key.slot.clone(),
                candidate_index: s.candidate.candidate_index,
                d_positive: s.d_positive,
                d_negatives: s.d_negatives.clone(),
                score: s.score,
                log_score: s.log_score,
                selected: s.selected,
            })
            .collect()
    }
}

fn select_embedded(
    input: &SelectionInput,
    vectors: &std::collections::HashMap<&str, &EmbeddingVector>,
    config: &SelectionConfig,
) -> Result<SelectedReasoning> {
    if input.perturbed.is_empty() {
        return Err(Error::Selection(format!(
            "{} turn {} {}: no perturbed reasonings available",
            input.key.dialogue_id, input.key.turn, input.key.slot
        )));
    }
    let lookup = |t: &str| (*vectors.get(t).expect("every text embedded")).clone();
    let positive = lookup(&input.positive_text);
    let negatives: Vec<_> = input.perturbed.iter().map(|c| lookup(&c.text)).collect();
    let candidates: Vec<_> = input
        .candidates
        .iter()
        .map(|c| (c.clone(), lookup(&c.text)))
        .collect();
    let (chosen, audit) = select(&candidates, &positive, &negatives, config)?;
    let win = &audit[chosen];
    Ok(SelectedReasoning {
        key: input.key.clone(),
        text: win.candidate.text.clone(),
        candidate_index: win.candidate.candidate_index,
        log_score: win.log_score,
        score: win.score,
        n_negatives: negatives.len(),
        negative_shortfall: config.n.saturating_sub(negatives.len()),
        audit,
    })
}

/// Embeds every text of every query in one pass, then selects per query.
/// A query with no surviving negatives fails on its own.
pub fn select_many(
    inputs: &[SelectionInput],
    embedder: &Embedder,
    config: &SelectionConfig,
) -> Result<Vec<Result<SelectedReasoning>>> {
    let mut texts: Vec<String> = Vec::new();
    for input in inputs {
        texts.push(input.positive_text.clone());
        texts.extend(input.candidates.iter().map(|c| c.text.clone()));
        texts.extend(input.perturbed.iter().map(|c| c.text.clone()));
    }
    let embedded = embedder.embed(&texts)?;
    let vectors: std::collections::HashMap<&str, &EmbeddingVector> =
        texts.iter().map(String::as_str).zip(embedded.iter()).collect();
    Ok(inputs
        .iter()
        .map(|input| select_embedded(input, &vectors, config))
        .collect())
}

/// Selection for a single query.
pub fn select_for_query(
    input: &SelectionInput,
    embedder: &Embedder,
    config: &SelectionConfig,
) -> Result<SelectedReasoning> {
    select_many(std::slice::from_ref(input), embedder, config)?
        .pop()
        .expect("one input")
}
