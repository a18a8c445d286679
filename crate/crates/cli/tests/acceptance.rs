//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ros_core::corpus::{
    iter_slot_queries, parse_sgd, Dialogue, SlotSchema, Split, TaskSpec, Turn,
};
use ros_core::embed::{EmbeddingVector, Metric};
use ros_core::metrics::{avg_jga, bwt, fwt, jga, AccuracyMatrix, Prediction};
use ros_core::perturb::{
    derive_seed, make_negative_batch, perturb_slot, perturb_value, PerturbCounts, PerturbationKind,
    PerturbationPools, SampleRng, SlotValue,
};
use ros_core::prompt::{split_target, Mode, PromptTemplates};
use ros_core::select::{score, score_distances, select, SelectionConfig};
use ros_core::teacher::{CandidateSource, ReasoningCandidate};
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:?}, limit {limit:?}"))
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

// ---------------------------------------------------------------------------
// 1. Metric oracle

fn random_matrix(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let k = rng.random_range(2..=6);
    (0..k).map(|_| (0..k).map(|_| rng.random_range(0.0..=1.0)).collect()).collect()
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let trials = 50;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let a = random_matrix(&mut rng);
        let k = a.len();
        let order: Vec<String> = (0..k).map(|i| i.to_string()).collect();
        let m = AccuracyMatrix::from_rows(order, &a).map_err(|e| e.to_string())?;
        let mut avg = 0.0;
        let mut fw = 0.0;
        let mut bw = 0.0;
        for i in 0..k {
            avg += a[k - 1][i];
            if i >= 1 {
                fw += a[i - 1][i];
            }
            if i + 1 < k {
                bw += a[k - 1][i] - a[i][i];
            }
        }
        let expected = [avg / k as f64, fw / (k - 1) as f64, bw / (k - 1) as f64];
        let got = [avg_jga(&m), fwt(&m), bwt(&m)];
        for (g, e) in got.into_iter().zip(expected) {
            let g = g.map_err(|e| e.to_string())?;
            worst = worst.max((g - e).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    for _ in 0..20 {
        let a = random_matrix(&mut rng);
        let k = a.len();
        let mut same = a.clone();
        for i in 0..k {
            same[k - 1][i] = same[i][i];
        }
        let m = AccuracyMatrix::from_rows((0..k).map(|i| i.to_string()).collect(), &same)
            .map_err(|e| e.to_string())?;
        let b = bwt(&m).map_err(|e| e.to_string())?;
        ensure(b == 0.0, || format!("BWT-zero identity broken: {b}"))?;
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("{trials} matrices, max deviation {worst:e}, BWT-zero identity exact"))
}

// ---------------------------------------------------------------------------
// 2. JGA oracle

fn jga_oracle_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let values = ["red", "Red ", "blue", "NONE", "none"];
    let mut fixtures = 0;
    for _ in 0..200 {
        let j = rng.random_range(1..=5);
        let task = TaskSpec {
            task_id: "t".into(),
            slots: (0..j)
                .map(|i| SlotSchema {
                    service_name: "svc".into(),
                    service_description: "d".into(),
                    slot_name: format!("s{i}"),
                    slot_description: "d".into(),
                })
                .collect(),
        };
        let mut dialogues = Vec::new();
        let mut preds = Vec::new();
        // (gold per slot, prediction per slot) per turn, kept for the oracle.
        let mut table: Vec<Vec<(String, Option<String>)>> = Vec::new();
        let mut budget: usize = 100;
        while budget > 0 && dialogues.len() < 8 {
            let n = rng.random_range(1..=budget.min(15));
            budget -= n;
            let id = format!("d{}", dialogues.len());
            let mut turns = Vec::new();
            for t in 1..=n {
                let mut state = BTreeMap::new();
                let mut row = Vec::new();
                for s in 0..j {
                    let slot = format!("<svc-s{s}>");
                    let gold = if rng.random_bool(0.5) {
                        let v = values[rng.random_range(0..3)].to_string();
                        state.insert(slot.clone(), v.clone());
                        v
                    } else {
                        "NONE".to_string()
                    };
                    let pred = if rng.random_bool(0.05) {
                        None
                    } else if rng.random_bool(0.8) {
                        Some(gold.clone())
                    } else {
                        Some(values[rng.random_range(0..values.len())].to_string())
                    };
                    if let Some(p) = &pred {
                        preds.push(Prediction {
                            dialogue_id: id.clone(),
                            turn: t,
                            slot: slot.clone(),
                            output: p.clone(),
                        });
                    }
                    row.push((gold, pred));
                }
                table.push(row);
                turns.push(Turn {
                    index: t,
                    system: String::new(),
                    user: "u".into(),
                    state,
                });
            }
            dialogues.push(Dialogue {
                dialogue_id: id,
                task_id: "t".into(),
                split: Split::Test,
                turns,
            });
        }
        let mut right = 0usize;
        for row in &table {
            let mut ok = true;
            for (gold, pred) in row {
                match pred {
                    Some(p) if p.trim().to_lowercase() == gold.trim().to_lowercase() => {}
                    _ => ok = false,
                }
            }
            right += usize::from(ok);
        }
        let expected = right as f64 / table.len() as f64;
        let refs: Vec<&Dialogue> = dialogues.iter().collect();
        let got = jga(&preds, &refs, &task, Mode::Vanilla).map_err(|e| e.to_string())?;
        ensure(got == expected, || format!("jga {got} != oracle {expected}"))?;
        fixtures += 1;
    }
    Ok(format!("{fixtures} random corpora (<=100 turns, <=5 slots) match exactly"))
}

// ---------------------------------------------------------------------------
// 3. Score properties

fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    EmbeddingVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite")
}

fn candidate(i: usize) -> ReasoningCandidate {
    ReasoningCandidate {
        text: format!("candidate {i}"),
        source: CandidateSource::Positive,
        candidate_index: i,
        prompt_hash: String::new(),
    }
}

fn score_properties() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let configs = 2000;
    let mut worst_rel = 0.0f64;
    for _ in 0..configs {
        let dim = rng.random_range(2..16);
        let n = rng.random_range(1..=6);
        let tau = rng.random_range(0.1..10.0);
        let cfg = SelectionConfig {
            tau,
            n,
            ..Default::default()
        };
        let cand = random_vec(&mut rng, dim);
        let pos = random_vec(&mut rng, dim);
        let negs: Vec<_> = (0..n).map(|_| random_vec(&mut rng, dim)).collect();
        let s = score(&cand, &pos, &negs, &cfg).map_err(|e| e.to_string())?;

        let closer = s.d_positive * rng.random_range(0.0..0.99);
        let c = score_distances(closer, &s.d_negatives, tau).map_err(|e| e.to_string())?;
        ensure(c.log_score < s.score.log_score, || "closer positive did not lower the score".into())?;

        let which = rng.random_range(0..n);
        let mut one_farther = s.d_negatives.clone();
        one_farther[which] += rng.random_range(0.01..2.0);
        let f = score_distances(s.d_positive, &one_farther, tau).map_err(|e| e.to_string())?;
        ensure(f.log_score <= s.score.log_score, || "farther negative raised the score".into())?;
        let all_farther: Vec<f64> = s.d_negatives.iter().map(|d| d + rng.random_range(0.01..2.0)).collect();
        let f = score_distances(s.d_positive, &all_farther, tau).map_err(|e| e.to_string())?;
        ensure(f.log_score < s.score.log_score, || "farther negatives did not lower the score".into())?;

        // Distances up to 20 after scaling the configuration.
        let scale = rng.random_range(0.1..7.0);
        let dp = s.d_positive * scale;
        let dn: Vec<f64> = s.d_negatives.iter().map(|d| d * scale).collect();
        let direct = (dp / tau).exp() / dn.iter().map(|d| (d / tau).exp()).sum::<f64>();
        let logged = score_distances(dp, &dn, tau).map_err(|e| e.to_string())?.score;
        worst_rel = worst_rel.max(((logged - direct) / direct).abs());
    }
    ensure(worst_rel <= 1e-9, || format!("log vs direct relative error {worst_rel:e}"))?;

    let sets = 200;
    for _ in 0..sets {
        let dim = rng.random_range(2..16);
        let g = rng.random_range(2..=8);
        let cands: Vec<_> = (0..g).map(|i| (candidate(i), random_vec(&mut rng, dim))).collect();
        let pos = random_vec(&mut rng, dim);
        let neg = [random_vec(&mut rng, dim)];
        let mut picks = BTreeSet::new();
        for tau in [0.1, 0.8, 10.0] {
            let cfg = SelectionConfig {
                tau,
                n: 1,
                ..Default::default()
            };
            picks.insert(select(&cands, &pos, &neg, &cfg).map_err(|e| e.to_string())?.0);
        }
        ensure(picks.len() == 1, || format!("N=1 argmin changed with tau: {picks:?}"))?;
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "{configs} configurations monotone, log/direct rel err {worst_rel:.1e}, {sets} N=1 sets tau-invariant"
    ))
}

// ---------------------------------------------------------------------------
// 4. Determinism and order-equivariance

fn selection_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let trials = 500;
    for trial in 0..trials {
        let dim = rng.random_range(2..12);
        let g = rng.random_range(1..=7);
        let metric = if trial % 2 == 0 { Metric::Euclidean } else { Metric::Cosine };
        let cfg = SelectionConfig {
            metric,
            ..Default::default()
        };
        let mut cands: Vec<_> = (0..g).map(|i| (candidate(i), random_vec(&mut rng, dim))).collect();
        // Duplicate one vector under a higher index to exercise ties.
        if g >= 2 {
            let v = cands[0].1.clone();
            cands[g - 1].1 = v;
        }
        let pos = random_vec(&mut rng, dim);
        let negs: Vec<_> = (0..6).map(|_| random_vec(&mut rng, dim)).collect();
        let (base, audit) = select(&cands, &pos, &negs, &cfg).map_err(|e| e.to_string())?;
        let min = audit.iter().map(|a| a.log_score).fold(f64::INFINITY, f64::min);
        let lowest_tied = audit
            .iter()
            .filter(|a| a.log_score == min)
            .map(|a| a.candidate.candidate_index)
            .min()
            .expect("non-empty");
        ensure(cands[base].0.candidate_index == lowest_tied, || "tie not resolved to lowest index".into())?;
        for _ in 0..4 {
            let mut shuffled = cands.clone();
            shuffled.shuffle(&mut rng);
            let (at, _) = select(&shuffled, &pos, &negs, &cfg).map_err(|e| e.to_string())?;
            ensure(shuffled[at].0.text == cands[base].0.text, || "permutation changed the selection".into())?;
        }
        let (again, _) = select(&cands, &pos, &negs, &cfg).map_err(|e| e.to_string())?;
        ensure(again == base, || "repeat run changed the selection".into())?;
    }
    Ok(format!("{trials} candidate sets x 4 permutations, ties to lowest index"))
}

// ---------------------------------------------------------------------------
// 5. Golden prompts

fn golden_prompts() -> Outcome {
    let dir = manifest_dir().join("../core/tests/golden");
    let read = |name: &str| std::fs::read_to_string(dir.join(name)).map_err(|e| format!("{name}: {e}"));
    let t = PromptTemplates::default();
    let therapist = SlotSchema {
        service_name: "services".into(),
        service_description: "Discover the right therapist for you and make reservations easily".into(),
        slot_name: "appointment_date".into(),
        slot_description: "Date of the appointment".into(),
    };
    let context = "[Previous dialogue omitted ...] [USER]: I would like an appointment at 10:45 am. [SYSTEM]: When is the appointment for? [USER]: The appointment is for the 11th of March. [SYSTEM]: Booking appointment with Rigg Christie on March 11th at 10:45 am. [Remaining dialogue omitted ...]";
    let (instruction, input) = t.teacher_text(context, &therapist, "10:45 am", true);
    ensure(instruction == read("a1_teacher_instruction.txt")?, || "teacher instruction differs".into())?;
    ensure(input == read("a1_teacher_input.txt")?, || "teacher input differs".into())?;
    ensure(instruction.contains("Just return a concise reasoning process"), || "anchor missing".into())?;

    let alarm = SlotSchema {
        service_name: "alarm_1".into(),
        service_description: "Manage alarms".into(),
        slot_name: "new_alarm_name".into(),
        slot_description: "Name to use for the new alarm".into(),
    };
    let context = "[USER]: I want to check the alarms I have. [SYSTEM]: There are 2 alarms which you have set currently, with one of the alarms being at 6:30 am, and it is called Wake Up. [USER]: Alright, that is good. [SYSTEM]: Are you interested to add another alarm? [USER]: Actually I am, I do want to add another alarm. I want the alarm to be called Grocery run.";
    let s = t.build_student_prompt(context, &alarm, None, "grocery run");
    ensure(s.instruction == read("a2_student_instruction.txt")?, || "student instruction differs".into())?;
    ensure(s.input == read("a2_student_input.txt")?, || "student input differs".into())?;
    ensure(s.expected_output == read("a2_student_output.txt")?, || "student output differs".into())?;
    ensure(s.input.contains("So the value of slot"), || "anchor missing".into())?;
    Ok("teacher and student prompts byte-identical to frozen fixtures".into())
}

// ---------------------------------------------------------------------------
// 6. Default configuration

fn ros() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ros"));
    cmd.env_clear();
    cmd
}

fn run(cmd: &mut Command) -> Result<String, String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{:?} exited {}: {}",
            cmd.get_args().collect::<Vec<_>>(),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn config_conformance() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = run(ros().current_dir(dir.path()).arg("show-config"))?;
    let m: Value = serde_json::from_str(&out).map_err(|e| e.to_string())?;
    let expect = [
        ("temperature", serde_json::json!(0.7)),
        ("g", serde_json::json!(5)),
        ("n", serde_json::json!(6)),
        ("n_value", serde_json::json!(3)),
        ("n_slot", serde_json::json!(3)),
        ("tau", serde_json::json!(0.8)),
        ("metric", serde_json::json!("euclidean")),
        ("memory_size", serde_json::json!(50)),
        ("turn_threshold", serde_json::json!(10)),
    ];
    for (key, value) in expect {
        ensure(m[key] == value, || format!("{key} = {}, expected {value}", m[key]))?;
    }
    let orders: [[u32; 15]; 5] = [
        [30, 31, 32, 33, 34, 35, 36, 37, 38, 39, 40, 41, 42, 43, 44],
        [39, 33, 36, 42, 40, 37, 38, 34, 32, 35, 41, 31, 30, 44, 43],
        [30, 41, 38, 31, 43, 39, 40, 33, 34, 44, 37, 36, 32, 35, 42],
        [43, 40, 44, 38, 30, 37, 31, 39, 32, 35, 41, 34, 33, 36, 42],
        [30, 33, 44, 31, 38, 32, 42, 40, 37, 43, 36, 39, 41, 35, 34],
    ];
    for (i, order) in orders.iter().enumerate() {
        let name = format!("order{}", i + 1);
        let got: Vec<u32> = serde_json::from_value(m["task_orders"][&name].clone()).map_err(|e| format!("{name}: {e}"))?;
        ensure(got == order, || format!("{name} = {got:?}"))?;
    }
    Ok("temperature 0.7, G=5, N=6 (3+3), tau 0.8, euclidean, M=50, threshold 10, orders 1-5".into())
}

// ---------------------------------------------------------------------------
// 7. End-to-end mock run

fn fixture_dir() -> PathBuf {
    manifest_dir().join("tests/fixtures/sgd_mini")
}

/// Bag-of-words featurizer: FNV-1a token hashes folded into 32 signed bins,
/// plus a constant bias component so no vector is zero.
fn featurize(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; 33];
    v[32] = 1.0;
    for token in text.split_whitespace() {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in token.to_lowercase().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % 32) as usize] += sign;
    }
    v
}

fn write_lines(path: &Path, lines: &[Value]) -> Result<(), String> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| e.to_string())
}

fn read_lines(path: &Path) -> Result<Vec<Value>, String> {
    std::fs::read_to_string(path)
        .map_err(|e| format!("{}: {e}", path.display()))?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect()
}

/// Turns whose predictions are corrupted in cell (j, i): every `k`-th turn.
const CORRUPT_EVERY: [[usize; 2]; 2] = [[0, 3], [4, 0]];

fn e2e_once(root: &Path) -> Result<Value, String> {
    let fixture = fixture_dir();
    let sgd = fixture.to_str().ok_or("non-utf8 path")?;
    let at = |args: &[&str]| -> Result<String, String> { run(ros().current_dir(root).args(args)) };

    at(&["ingest", "--sgd-dir", sgd, "--out", "corpus"])?;
    at(&["distill", "--corpus", "corpus", "--out", "texts", "--export-texts", "texts.jsonl", "--cache-dir", "cache"])?;

    let rows: Vec<Value> = read_lines(&root.join("texts.jsonl"))?
        .into_iter()
        .map(|r| {
            let text = r["text"].as_str().unwrap_or_default();
            serde_json::json!({"text_hash": r["text_hash"], "vector": featurize(text)})
        })
        .collect();
    write_lines(&root.join("embeddings.jsonl"), &rows)?;

    at(&[
        "distill", "--corpus", "corpus", "--out", "distill", "--embedding", "file", "--embeddings",
        "embeddings.jsonl", "--cache-dir", "cache", "--strict",
    ])?;
    at(&["emit", "--corpus", "corpus", "--out", "train.jsonl", "--selections", "distill", "--mode", "rationalized"])?;

    // Round-trip every record against the corpus gold value.
    let corpus = ros_core::corpus::Corpus::load(&root.join("corpus")).map_err(|e| e.to_string())?;
    let selections: BTreeMap<(String, usize, String), String> = read_lines(&root.join("distill/selections.jsonl"))?
        .into_iter()
        .map(|s| {
            (
                (
                    s["dialogue_id"].as_str().unwrap_or_default().to_string(),
                    s["turn"].as_u64().unwrap_or_default() as usize,
                    s["slot"].as_str().unwrap_or_default().to_string(),
                ),
                s["text"].as_str().unwrap_or_default().to_string(),
            )
        })
        .collect();
    let records = read_lines(&root.join("train.jsonl"))?;
    let templates = PromptTemplates::default();
    let mut expected_records = 0;
    for d in &corpus.dialogues {
        expected_records += d.turns.len() * corpus.task(&d.task_id).map_or(0, |t| t.slot_count());
    }
    ensure(records.len() == expected_records, || format!("{} records, expected {expected_records}", records.len()))?;
    for r in &records {
        let meta = &r["meta"];
        let id = meta["dialogue_id"].as_str().unwrap_or_default();
        let turn = meta["turn"].as_u64().unwrap_or_default() as usize;
        let slot = meta["qualified_slot"].as_str().unwrap_or_default();
        let output = r["output"].as_str().unwrap_or_default();
        let (rationale, value) = split_target(output).ok_or_else(|| format!("no marker in {id}/{turn}/{slot}"))?;
        let d = corpus.dialogues.iter().find(|d| d.dialogue_id == id).ok_or("unknown dialogue")?;
        let gold = d.turns[turn - 1].state.get(slot).map_or("NONE", String::as_str);
        ensure(value == gold, || format!("{id}/{turn}/{slot}: value {value:?} != gold {gold:?}"))?;
        let expected_r = if turn > 10 {
            selections
                .get(&(id.to_string(), turn, slot.to_string()))
                .cloned()
                .ok_or_else(|| format!("no selection for {id}/{turn}/{slot}"))?
        } else {
            templates.short_reasoning.clone()
        };
        ensure(rationale == expected_r, || format!("{id}/{turn}/{slot}: rationale differs"))?;
    }

    // Predictions: cell (j, i) echoes the gold targets of task i, corrupting
    // every k-th turn; the expected JGA is the uncorrupted turn fraction.
    let order = ["30", "36"];
    std::fs::create_dir_all(root.join("preds")).map_err(|e| e.to_string())?;
    let mut expected = [[0.0; 2]; 2];
    for (j, row) in CORRUPT_EVERY.iter().enumerate() {
        for (i, &k) in row.iter().enumerate() {
            let mut lines = Vec::new();
            let mut turns = BTreeSet::new();
            let mut bad = BTreeSet::new();
            for r in records.iter().filter(|r| r["meta"]["task_id"] == order[i]) {
                let meta = &r["meta"];
                let turn = meta["turn"].as_u64().unwrap_or_default();
                let key = (meta["dialogue_id"].as_str().unwrap_or_default().to_string(), turn);
                turns.insert(key.clone());
                let mut output = r["output"].clone();
                if k > 0 && turn % k as u64 == 0 {
                    output = Value::from("I am not sure.\n[VALUE] something else");
                    bad.insert(key);
                }
                lines.push(serde_json::json!({
                    "dialogue_id": meta["dialogue_id"], "turn": turn, "slot": meta["qualified_slot"], "output": output,
                }));
            }
            expected[j][i] = 1.0 - bad.len() as f64 / turns.len() as f64;
            write_lines(&root.join(format!("preds/preds_after-{}_on-{}.jsonl", j + 1, i + 1)), &lines)?;
        }
    }
    at(&["evaluate", "--corpus", "corpus", "--preds", "preds", "--order", "30,36", "--split", "train", "--out", "report"])?;
    let report: Value = serde_json::from_str(
        &std::fs::read_to_string(root.join("report/report.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let checks = [
        ("avg_jga", (expected[1][0] + expected[1][1]) / 2.0),
        ("fwt", expected[0][1]),
        ("bwt", expected[1][0] - expected[0][0]),
    ];
    for (key, want) in checks {
        let got = report[key].as_f64().ok_or_else(|| format!("{key} missing"))?;
        ensure((got - want).abs() < 1e-12, || format!("{key} = {got}, expected {want}"))?;
    }
    Ok(serde_json::json!({"records": records.len(), "avg_jga": report["avg_jga"]}))
}

fn tree_bytes(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).map_err(|e| e.to_string())?.to_path_buf();
                out.insert(rel, std::fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(out)
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let summary = e2e_once(a.path())?;
    e2e_once(b.path())?;
    let (ta, tb) = (tree_bytes(a.path())?, tree_bytes(b.path())?);
    ensure(ta.keys().eq(tb.keys()), || "runs produced different file sets".into())?;
    let differing: Vec<_> = ta.iter().filter(|(k, v)| tb[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure(differing.is_empty(), || format!("files differ between runs: {differing:?}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "{} files bit-identical across two runs, {} records round-trip, avg JGA {}",
        ta.len(),
        summary["records"],
        summary["avg_jga"]
    ))
}

// ---------------------------------------------------------------------------
// 8. Perturbation contracts

fn perturbation_contracts() -> Outcome {
    let (corpus, _) = parse_sgd(&fixture_dir(), &[]).map_err(|e| e.to_string())?;
    let templates = PromptTemplates::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut queries = Vec::new();
    for d in &corpus.dialogues {
        let task = corpus.task(&d.task_id).ok_or("task")?;
        for t in 1..=d.turns.len() {
            queries.extend(iter_slot_queries(d, task, t).into_iter().map(|q| (task, q)));
        }
    }
    let pools: BTreeMap<String, PerturbationPools> = corpus
        .tasks
        .iter()
        .map(|t| (t.task_id.clone(), PerturbationPools::for_task(&corpus, &t.task_id)))
        .collect();
    let (mut total, mut value_level, mut slot_level) = (0usize, 0usize, 0usize);
    let mut draw = 0u64;
    while total < 10_000 {
        let (task, query) = &queries[rng.random_range(0..queries.len())];
        let pool = &pools[&task.task_id];
        let observed: BTreeSet<&SlotValue> = pool.pairs.iter().collect();
        let original = SlotValue {
            slot: query.qualified_slot(),
            value: query.gold.clone(),
        };
        draw += 1;
        let mut sample = SampleRng::new(derive_seed(99, &query.dialogue_id, query.turn, &format!("{}#{draw}", original.slot)));
        let mut produced = Vec::new();
        match draw % 3 {
            0 => produced.extend(perturb_value(&original, pool, &mut sample).ok()),
            1 => produced.extend(perturb_slot(&original, pool, &mut sample).ok()),
            _ => produced.extend(
                make_negative_batch(query, task, pool, PerturbCounts::default(), &templates, &mut sample)
                    .map(|b| b.into_iter().map(|(p, _)| p).collect::<Vec<_>>())
                    .unwrap_or_default(),
            ),
        }
        for p in produced {
            total += 1;
            ensure(p.replacement != p.original, || format!("replacement equals original: {p:?}"))?;
            match p.kind {
                PerturbationKind::ValueLevel => {
                    value_level += 1;
                    ensure(p.replacement.slot == p.original.slot, || format!("value-level changed slot: {p:?}"))?;
                    ensure(!p.replacement.value.eq_ignore_ascii_case(&p.original.value), || format!("{p:?}"))?;
                    ensure(observed.contains(&p.replacement), || format!("unobserved value: {p:?}"))?;
                }
                PerturbationKind::SlotLevel => {
                    slot_level += 1;
                    ensure(p.replacement.slot != p.original.slot, || format!("slot-level kept slot: {p:?}"))?;
                    ensure(observed.contains(&p.replacement), || format!("unobserved pair: {p:?}"))?;
                    ensure(task.slot(&p.replacement.slot).is_some(), || format!("foreign slot: {p:?}"))?;
                }
            }
        }
    }
    Ok(format!("{total} perturbations ({value_level} value-level, {slot_level} slot-level), zero violations"))
}

// ---------------------------------------------------------------------------
// 9. Stated non-reproducible results

fn not_reproducible() -> Outcome {
    let readme = std::fs::read_to_string(manifest_dir().join("../../README.md")).map_err(|e| e.to_string())?;
    ensure(readme.contains("Not reproduced here"), || "README lacks the not-reproduced statement".into())?;
    Ok("trained-model accuracy, hallucination scores and the manual error split need large-scale LLM \
        training and are stated as out of reach; criteria 1-8 stand in for them"
        .into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("metric-oracle", metric_oracle),
        ("jga-oracle", jga_oracle_check),
        ("score-properties", score_properties),
        ("selection-determinism-equivariance", selection_equivariance),
        ("golden-prompts", golden_prompts),
        ("default-config-conformance", config_conformance),
        ("end-to-end-mock-run", end_to_end),
        ("perturbation-contracts", perturbation_contracts),
        ("not-reproducible-at-desk-scale", not_reproducible),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        match check() {
            Ok(detail) => println!("PASS {name} ({:.2?}): {detail}", start.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({:.2?}): {why}", start.elapsed());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
