//! Joint goal accuracy, the continual-learning accuracy matrix, and the
//! metrics derived from it.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{gold_value, Dialogue, TaskSpec};
use crate::error::{Error, Result};
use crate::prompt::{Mode, VALUE_MARKER};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extracted {
    pub value: String,
    /// False when rationalized output lacked the value marker.
    pub marker_found: bool,
}

/// Recovers the predicted value from a raw model output.
pub fn extract_answer(raw: &str, mode: Mode) -> Extracted {
    match mode {
        Mode::Vanilla => Extracted {
            value: raw.trim().to_string(),
            marker_found: true,
        },
        Mode::Rationalized => match raw.rfind(VALUE_MARKER) {
            Some(at) => Extracted {
                value: raw[at + VALUE_MARKER.len()..].trim().to_string(),
                marker_found: true,
            },
            None => Extracted {
                value: raw.trim().to_string(),
                marker_found: false,
            },
        },
    }
}

/// Lowercases, trims and collapses whitespace runs. Nothing else.
pub fn normalize_value(v: &str) -> String {
    v.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub dialogue_id: String,
    pub turn: usize,
    pub slot: String,
    pub output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub jga: f64,
    pub turns: usize,
    pub correct_turns: usize,
    /// Gold queries with no prediction (counted wrong).
    pub missing_predictions: usize,
    /// Rationalized outputs without a value marker.
    pub markers_missing: usize,
    /// Predictions that match no gold query.
    pub extra_predictions: usize,
}

/// Scores one prediction set against the test dialogues of one task.
pub fn evaluate_cell(
    predictions: &[Prediction],
    test: &[&Dialogue],
    task: &TaskSpec,
    mode: Mode,
) -> Result<CellResult> {
    let mut by_key: HashMap<(&str, usize, &str), &str> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_key
            .insert((&p.dialogue_id, p.turn, &p.slot), &p.output)
            .is_some()
        {
            return Err(Error::Duplicate(format!(
                "({}, turn {}, {})",
                p.dialogue_id, p.turn, p.slot
            )));
        }
    }
    let slots: Vec<String> = task.slots.iter().map(|s| s.qualified()).collect();
    let (mut turns, mut correct, mut missing, mut no_marker, mut used) = (0, 0, 0, 0, 0);
    for d in test {
        for turn in &d.turns {
            turns += 1;
            let mut all = true;
            for (schema, slot) in task.slots.iter().zip(&slots) {
                match by_key.get(&(d.dialogue_id.as_str(), turn.index, slot.as_str())) {
                    Some(raw) => {
                        used += 1;
                        let ext = extract_answer(raw, mode);
                        if !ext.marker_found {
                            no_marker += 1;
                        }
                        if normalize_value(&ext.value) != normalize_value(&gold_value(turn, schema)) {
                            all = false;
                        }
                    }
                    None => {
                        missing += 1;
                        all = false;
                    }
                }
            }
            if all {
                correct += 1;
            }
        }
    }
    if turns == 0 {
        return Err(Error::Validation(format!(
            "task {} has no test turns to evaluate",
            task.task_id
        )));
    }
    Ok(CellResult {
        jga: correct as f64 / turns as f64,
        turns,
        correct_turns: correct,
        missing_predictions: missing,
        markers_missing: no_marker,
        extra_predictions: predictions.len() - used,
    })
}

/// Fraction of test turns whose every slot prediction matches gold.
pub fn jga(predictions: &[Prediction], test: &[&Dialogue], task: &TaskSpec, mode: Mode) -> Result<f64> {
    evaluate_cell(predictions, test, task, mode).map(|c| c.jga)
}

/// `a[j][i]`: accuracy on task `i` after training through task `j`, both
/// 1-based positions in the task order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub order: Vec<String>,
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(order: Vec<String>) -> Self {
        let k = order.len();
        Self {
            order,
            cells: vec![vec![None; k]; k],
        }
    }

    pub fn k(&self) -> usize {
        self.order.len()
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.cells
    }

    fn check(&self, j: usize, i: usize) -> Result<()> {
        let k = self.k();
        if j == 0 || i == 0 || j > k || i > k {
            return Err(Error::Validation(format!(
                "cell ({j}, {i}) outside a {k}x{k} matrix"
            )));
        }
        Ok(())
    }

    pub fn set(&mut self, j: usize, i: usize, value: f64) -> Result<()> {
        self.check(j, i)?;
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Validation(format!(
                "cell ({j}, {i}) = {value} is outside [0, 1]"
            )));
        }
        self.cells[j - 1][i - 1] = Some(value);
        Ok(())
    }

    pub fn get(&self, j: usize, i: usize) -> Result<f64> {
        self.check(j, i)?;
        self.cells[j - 1][i - 1].ok_or(Error::MissingCell { j, i })
    }

    pub fn from_rows(order: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(order);
        if rows.len() != m.k() || rows.iter().any(|r| r.len() != m.k()) {
            return Err(Error::Validation("matrix rows do not match the task order".into()));
        }
        for (j, row) in rows.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                m.set(j + 1, i + 1, v)?;
            }
        }
        Ok(m)
    }
}

fn need_two(m: &AccuracyMatrix, what: &str) -> Result<usize> {
    let k = m.k();
    if k < 2 {
        return Err(Error::Validation(format!("{what} needs at least 2 tasks, got {k}")));
    }
    Ok(k)
}

/// Mean of the final row.
pub fn avg_jga(m: &AccuracyMatrix) -> Result<f64> {
    let k = m.k();
    if k == 0 {
        return Err(Error::Validation("empty accuracy matrix".into()));
    }
    let mut sum = 0.0;
    for i in 1..=k {
        sum += m.get(k, i)?;
    }
    Ok(sum / k as f64)
}

/// Mean zero-shot accuracy `a[i-1][i]`, i = 2..K.
pub fn fwt(m: &AccuracyMatrix) -> Result<f64> {
    let k = need_two(m, "FWT")?;
    let mut sum = 0.0;
    for i in 2..=k {
        sum += m.get(i - 1, i)?;
    }
    Ok(sum / (k - 1) as f64)
}

/// Mean of `a[K][i] - a[i][i]`, i = 1..K-1.
pub fn bwt(m: &AccuracyMatrix) -> Result<f64> {
    let k = need_two(m, "BWT")?;
    let mut sum = 0.0;
    for i in 1..k {
        sum += m.get(k, i)? - m.get(i, i)?;
    }
    Ok(sum / (k - 1) as f64)
}

/// `(j, a[j][i])` for j = i..K.
pub fn forgetting_curve(m: &AccuracyMatrix, i: usize) -> Result<Vec<(usize, f64)>> {
    (i..=m.k()).map(|j| Ok((j, m.get(j, i)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskJga {
    pub position: usize,
    pub task_id: String,
    /// Accuracy after the whole sequence, `a[K][i]`.
    pub final_jga: Option<f64>,
    /// Accuracy right after training on the task, `a[i][i]`.
    pub learned_jga: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub position: usize,
    pub task_id: String,
    pub points: Vec<(usize, f64)>,
}

/// Evaluation report. Metrics whose cells are missing are `null` and the
/// reason is listed in `notes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub avg_jga: Option<f64>,
    pub fwt: Option<f64>,
    pub bwt: Option<f64>,
    pub matrix: AccuracyMatrix,
    pub per_task_jga: Vec<TaskJga>,
    pub curves: Vec<Curve>,
    pub notes: Vec<String>,
}

impl Report {
    pub fn from_matrix(matrix: AccuracyMatrix) -> Self {
        let mut notes = Vec::new();
        let mut keep = |name: &str, r: Result<f64>| match r {
            Ok(v) => Some(v),
            Err(e) => {
                notes.push(format!("{name}: {e}"));
                None
            }
        };
        let avg = keep("avg_jga", avg_jga(&matrix));
        let fwt = keep("fwt", fwt(&matrix));
        let bwt = keep("bwt", bwt(&matrix));
        let k = matrix.k();
        let per_task_jga = matrix
            .order
            .iter()
            .enumerate()
            .map(|(idx, task_id)| TaskJga {
                position: idx + 1,
                task_id: task_id.clone(),
                final_jga: matrix.get(k, idx + 1).ok(),
                learned_jga: matrix.get(idx + 1, idx + 1).ok(),
            })
            .collect();
        let curves = matrix
            .order
            .iter()
            .enumerate()
            .filter_map(|(idx, task_id)| {
                forgetting_curve(&matrix, idx + 1).ok().map(|points| Curve {
                    position: idx + 1,
                    task_id: task_id.clone(),
                    points,
                })
            })
            .collect();
        Self {
            avg_jga: avg,
            fwt,
            bwt,
            matrix,
            per_task_jga,
            curves,
            notes,
        }
    }

    /// Human-readable summary with the matrix as a table.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "Avg. JGA  {}", fmt(self.avg_jga));
        let _ = writeln!(out, "FWT       {}", fmt(self.fwt));
        let _ = writeln!(out, "BWT       {}", fmt(self.bwt));
        let _ = writeln!(out);
        let _ = write!(out, "{:>12}", "after\\on");
        for t in &self.matrix.order {
            let _ = write!(out, " {t:>8}");
        }
        let _ = writeln!(out);
        for (j, row) in self.matrix.rows().iter().enumerate() {
            let _ = write!(out, "{:>12}", self.matrix.order[j]);
            for cell in row {
                let _ = write!(out, " {:>8}", cell.map_or("-".to_string(), |v| format!("{v:.4}")));
            }
            let _ = writeln!(out);
        }
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }

    /// The matrix as CSV; the header row holds task ids and empty cells are
    /// missing.
    pub fn matrix_csv(&self) -> String {
        let mut out = String::from("after");
        for t in &self.matrix.order {
            out.push(',');
            out.push_str(t);
        }
        out.push('\n');
        for (j, row) in self.matrix.rows().iter().enumerate() {
            out.push_str(&self.matrix.order[j]);
            for cell in row {
                out.push(',');
                if let Some(v) = cell {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    /// Standard error of the mean; `None` with fewer than two runs.
    pub stderr: Option<f64>,
    pub runs: usize,
}

pub fn mean_stderr(values: &[f64]) -> Option<MeanStderr> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = (n > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    Some(MeanStderr { mean, stderr, runs: n })
}

/// Mean and standard error of each metric across runs (e.g. task orders).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub avg_jga: Option<MeanStderr>,
    pub fwt: Option<MeanStderr>,
    pub bwt: Option<MeanStderr>,
}

pub fn aggregate(reports: &[Report]) -> Aggregate {
    let collect = |f: fn(&Report) -> Option<f64>| -> Option<MeanStderr> {
        mean_stderr(&reports.iter().filter_map(f).collect::<Vec<_>>())
    };
    Aggregate {
        avg_jga: collect(|r| r.avg_jga),
        fwt: collect(|r| r.fwt),
        bwt: collect(|r| r.bwt),
    }
}

/// Parses `preds_after-{j}_on-{i}.jsonl` into `(j, i)`.
pub fn parse_prediction_filename(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("preds_after-")?.strip_suffix(".jsonl")?;
    let (j, i) = rest.split_once("_on-")?;
    Some((j.parse().ok()?, i.parse().ok()?))
}

pub fn prediction_filename(j: usize, i: usize) -> String {
    format!("preds_after-{j}_on-{i}.jsonl")
}

/// Prediction files in `dir`, keyed by `(j, i)`.
pub fn scan_prediction_dir(dir: &Path) -> Result<BTreeMap<(usize, usize), PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(cell) = entry.file_name().to_str().and_then(parse_prediction_filename) {
            out.insert(cell, entry.path());
        }
    }
    Ok(out)
}
