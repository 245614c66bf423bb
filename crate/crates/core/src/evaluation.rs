//! Joint goal accuracy, per-turn accuracy, slot accuracy, and SOP accuracy
//! over prediction dumps.
//!
//! Turns are numbered from 1. Values are compared after lowercasing and
//! collapsing whitespace.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{derive_sop_labels, Dialogue, DialogueState, Schema, SopLabelMatrix};
use crate::error::{DsdnError, Result};

/// One line of a prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub turn: usize,
    pub state: DialogueState,
    /// Thresholded per-slot update bits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sop: Option<BTreeMap<String, u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub joint_ga: f64,
    /// Joint GA per absolute turn index; empty buckets are omitted.
    pub per_turn_joint_ga: BTreeMap<usize, f64>,
    /// Turns evaluated per bucket.
    pub counts: BTreeMap<usize, usize>,
    pub slot_accuracy: BTreeMap<String, f64>,
    /// Fraction of turns whose every SOP bit is right, when the dump carries SOP bits.
    pub sop_joint_ga: Option<f64>,
    pub n_turns: usize,
}

impl EvalReport {
    /// `turn,count,joint_ga` rows, one per bucket.
    pub fn per_turn_csv(&self) -> String {
        let mut out = String::from("turn,count,joint_ga\n");
        for (turn, ga) in &self.per_turn_joint_ga {
            let _ = writeln!(out, "{turn},{},{ga}", self.counts[turn]);
        }
        out
    }
}

pub fn normalize_value(v: &str) -> String {
    v.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn states_match(pred: &DialogueState, gold: &DialogueState) -> bool {
    gold.iter().all(|(slot, g)| {
        pred.get(slot)
            .is_some_and(|p| normalize_value(p) == normalize_value(g))
    }) && pred.keys().all(|k| gold.contains_key(k))
}

/// Pairs every gold turn with its prediction.
fn align<'p, 'g>(
    predictions: &'p [PredictionRecord],
    golds: &'g [Dialogue],
) -> Result<Vec<(&'p PredictionRecord, &'g Dialogue, usize)>> {
    let mut by_key: HashMap<(&str, usize), &PredictionRecord> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_key.insert((p.id.as_str(), p.turn), p).is_some() {
            return Err(DsdnError::Alignment {
                message: "duplicate prediction".into(),
                missing: vec![format!("{}#{}", p.id, p.turn)],
            });
        }
    }
    let mut pairs = Vec::with_capacity(predictions.len());
    let mut missing = Vec::new();
    for d in golds {
        for t in 1..=d.len() {
            match by_key.remove(&(d.id.as_str(), t)) {
                Some(p) => pairs.push((p, d, t)),
                None => missing.push(format!("{}#{t}", d.id)),
            }
        }
    }
    if !missing.is_empty() {
        return Err(DsdnError::Alignment {
            message: format!("{} gold turns have no prediction", missing.len()),
            missing,
        });
    }
    if !by_key.is_empty() {
        let mut extra: Vec<String> = by_key.keys().map(|(id, t)| format!("{id}#{t}")).collect();
        extra.sort();
        return Err(DsdnError::Alignment {
            message: format!("{} predictions have no gold turn", extra.len()),
            missing: extra,
        });
    }
    Ok(pairs)
}

pub fn joint_goal_accuracy(predictions: &[PredictionRecord], golds: &[Dialogue]) -> Result<f64> {
    let pairs = align(predictions, golds)?;
    if pairs.is_empty() {
        return Err(DsdnError::Argument("no turns to evaluate".into()));
    }
    let correct = pairs
        .iter()
        .filter(|(p, d, t)| states_match(&p.state, &d.turns[t - 1].state))
        .count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// Joint GA and turn count per absolute turn index.
pub fn per_turn_breakdown(predictions: &[PredictionRecord], golds: &[Dialogue]) -> Result<BTreeMap<usize, (f64, usize)>> {
    let mut buckets: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, d, t) in align(predictions, golds)? {
        let e = buckets.entry(t).or_default();
        e.1 += 1;
        if states_match(&p.state, &d.turns[t - 1].state) {
            e.0 += 1;
        }
    }
    Ok(buckets
        .into_iter()
        .map(|(t, (c, n))| (t, (c as f64 / n as f64, n)))
        .collect())
}

/// Fraction of turns whose predicted update bits all equal the gold labels.
/// `predicted[i]` and `labels[i]` are `J × T` matrices of the same dialogue.
pub fn sop_joint_ga(predicted: &[SopLabelMatrix], labels: &[SopLabelMatrix]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(DsdnError::Argument(format!(
            "{} predicted SOP matrices for {} label matrices",
            predicted.len(),
            labels.len()
        )));
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for (p, y) in predicted.iter().zip(labels) {
        if (p.num_slots(), p.num_turns()) != (y.num_slots(), y.num_turns()) {
            return Err(DsdnError::Argument(format!(
                "SOP shape {}×{} differs from labels {}×{}",
                p.num_slots(),
                p.num_turns(),
                y.num_slots(),
                y.num_turns()
            )));
        }
        for t in 0..y.num_turns() {
            total += 1;
            if (0..y.num_slots()).all(|j| p.get(j, t) == y.get(j, t)) {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(DsdnError::Argument("no turns to evaluate".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Full report. SOP accuracy is included only when every record carries SOP bits.
pub fn evaluate(predictions: &[PredictionRecord], golds: &[Dialogue], schema: &Schema) -> Result<EvalReport> {
    let pairs = align(predictions, golds)?;
    if pairs.is_empty() {
        return Err(DsdnError::Argument("no turns to evaluate".into()));
    }
    let n = pairs.len();
    let breakdown = per_turn_breakdown(predictions, golds)?;
    let joint_ga = joint_goal_accuracy(predictions, golds)?;
    let mut slot_accuracy = BTreeMap::new();
    for slot in schema.slots() {
        let right = pairs
            .iter()
            .filter(|(p, d, t)| {
                let gold = &d.turns[t - 1].state[&slot.name];
                p.state
                    .get(&slot.name)
                    .is_some_and(|v| normalize_value(v) == normalize_value(gold))
            })
            .count();
        slot_accuracy.insert(slot.name.clone(), right as f64 / n as f64);
    }
    let sop_joint_ga = if predictions.iter().all(|p| p.sop.is_some()) {
        let mut predicted = Vec::with_capacity(golds.len());
        let mut labels = Vec::with_capacity(golds.len());
        let by_key: HashMap<(&str, usize), &PredictionRecord> =
            predictions.iter().map(|p| ((p.id.as_str(), p.turn), p)).collect();
        for d in golds {
            labels.push(derive_sop_labels(d, schema)?);
            let rows = schema
                .slots()
                .iter()
                .map(|s| {
                    (1..=d.len())
                        .map(|t| {
                            let bits = by_key[&(d.id.as_str(), t)].sop.as_ref().expect("checked above");
                            bits.get(&s.name).copied().ok_or_else(|| DsdnError::MissingField {
                                field: s.name.clone(),
                                context: format!("sop of {}#{t}", d.id),
                            })
                        })
                        .collect::<Result<Vec<u8>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            predicted.push(SopLabelMatrix::from_rows(rows));
        }
        Some(sop_joint_ga(&predicted, &labels)?)
    } else {
        None
    };
    Ok(EvalReport {
        joint_ga,
        per_turn_joint_ga: breakdown.iter().map(|(t, (ga, _))| (*t, *ga)).collect(),
        counts: breakdown.iter().map(|(t, (_, c))| (*t, *c)).collect(),
        slot_accuracy,
        sop_joint_ga,
        n_turns: n,
    })
}

/// Gold states of `golds` as a prediction dump (SOP bits from the gold labels).
pub fn gold_records(golds: &[Dialogue], schema: &Schema) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for d in golds {
        let labels = derive_sop_labels(d, schema)?;
        for (t, turn) in d.turns.iter().enumerate() {
            out.push(PredictionRecord {
                id: d.id.clone(),
                turn: t + 1,
                state: turn.state.clone(),
                sop: Some(
                    schema
                        .slots()
                        .iter()
                        .enumerate()
                        .map(|(j, s)| (s.name.clone(), labels.get(j, t)))
                        .collect(),
                ),
            });
        }
    }
    Ok(out)
}

pub fn save_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| DsdnError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| DsdnError::io(path, e))?;
    }
    w.flush().map_err(|e| DsdnError::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = fs::File::open(path).map_err(|e| DsdnError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DsdnError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DsdnError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
