//! Schemas, dialogues, cumulative dialogue states and state-operation labels.

mod io;
mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DsdnError, Result};

pub use io::{
    load_dialogues, load_multiwoz_format, load_schema, parse_dialogue_line, save_dialogues, save_schema,
    UnknownValuePolicy,
};
pub use synthetic::{generate_synthetic_corpus, template_skeletons, toy_schema, CorpusManifest};

/// Value carried by every slot that has not been mentioned.
pub const NONE_VALUE: &str = "none";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDef {
    /// `"domain-slot"`, e.g. `"hotel-book day"`.
    pub name: String,
    /// Candidate values; always contains [`NONE_VALUE`].
    pub values: Vec<String>,
}

impl SlotDef {
    pub fn domain(&self) -> &str {
        self.name.split_once('-').map_or(self.name.as_str(), |(d, _)| d)
    }

    pub fn slot(&self) -> &str {
        self.name.split_once('-').map_or("", |(_, s)| s)
    }

    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }
}

/// An ordered slot ontology. Slot order defines the slot index everywhere.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct Schema {
    slots: Vec<SlotDef>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    slots: Vec<SlotDef>,
}

impl TryFrom<RawSchema> for Schema {
    type Error = DsdnError;

    fn try_from(raw: RawSchema) -> Result<Self> {
        Schema::new(raw.slots)
    }
}

impl From<Schema> for RawSchema {
    fn from(s: Schema) -> Self {
        RawSchema { slots: s.slots }
    }
}

impl Schema {
    pub fn new(slots: Vec<SlotDef>) -> Result<Self> {
        if slots.is_empty() {
            return Err(DsdnError::Schema("schema has no slots".into()));
        }
        let mut index = HashMap::with_capacity(slots.len());
        for (j, s) in slots.iter().enumerate() {
            if s.name.trim().is_empty() {
                return Err(DsdnError::Schema(format!("slot {j} has an empty name")));
            }
            if index.insert(s.name.clone(), j).is_some() {
                return Err(DsdnError::Schema(format!("duplicate slot `{}`", s.name)));
            }
            if !s.values.iter().any(|v| v == NONE_VALUE) {
                return Err(DsdnError::Schema(format!(
                    "slot `{}` has no `{NONE_VALUE}` candidate",
                    s.name
                )));
            }
            let mut seen = HashSet::new();
            for v in &s.values {
                if !seen.insert(v) {
                    return Err(DsdnError::Schema(format!(
                        "slot `{}` lists value `{v}` twice",
                        s.name
                    )));
                }
            }
        }
        Ok(Self { slots, index })
    }

    pub fn slots(&self) -> &[SlotDef] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn slot(&self, j: usize) -> &SlotDef {
        &self.slots[j]
    }

    pub(crate) fn add_value(&mut self, j: usize, value: String) {
        self.slots[j].values.push(value);
    }

    /// State with every slot set to `"none"`.
    pub fn empty_state(&self) -> DialogueState {
        self.slots
            .iter()
            .map(|s| (s.name.clone(), NONE_VALUE.to_string()))
            .collect()
    }

    /// Hex SHA-256 over the canonical JSON rendering (slot order and values included).
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Per-slot candidate index of every value in `state`, in slot order.
    pub fn value_indices(&self, state: &DialogueState) -> Result<Vec<usize>> {
        self.check_state(state)?;
        Ok(self
            .slots
            .iter()
            .map(|s| s.value_index(&state[&s.name]).expect("checked above"))
            .collect())
    }

    /// Totality and ontology membership of a dialogue state.
    pub fn check_state(&self, state: &DialogueState) -> Result<()> {
        for name in state.keys() {
            if self.slot_index(name).is_none() {
                return Err(DsdnError::Schema(format!("unknown slot `{name}`")));
            }
        }
        for s in &self.slots {
            let v = state
                .get(&s.name)
                .ok_or_else(|| DsdnError::Schema(format!("slot `{}` has no value", s.name)))?;
            if s.value_index(v).is_none() {
                return Err(DsdnError::Schema(format!(
                    "value `{v}` is not a candidate of slot `{}`",
                    s.name
                )));
            }
        }
        Ok(())
    }
}

/// Total map from slot name to value.
pub type DialogueState = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    pub system: String,
    /// Cumulative state after this turn.
    pub state: DialogueState,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// The dialogue truncated to its first `t` turns.
    pub fn prefix(&self, t: usize) -> Dialogue {
        Dialogue {
            id: self.id.clone(),
            turns: self.turns[..t.min(self.turns.len())].to_vec(),
        }
    }

    /// State before turn `t` (0-based); the virtual state before the first turn is all-`"none"`.
    pub fn previous_state(&self, t: usize, schema: &Schema) -> DialogueState {
        if t == 0 {
            schema.empty_state()
        } else {
            self.turns[t - 1].state.clone()
        }
    }
}

/// `labels[j][t] = 1` iff slot `j` changes value at turn `t` (both 0-based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SopLabelMatrix {
    labels: Vec<Vec<u8>>,
}

impl SopLabelMatrix {
    /// Panics on ragged rows or non-binary entries.
    pub fn from_rows(labels: Vec<Vec<u8>>) -> Self {
        let turns = labels.first().map_or(0, Vec::len);
        for row in &labels {
            assert_eq!(row.len(), turns, "ragged label matrix");
            assert!(row.iter().all(|v| *v <= 1), "labels must be binary");
        }
        Self { labels }
    }

    pub fn num_slots(&self) -> usize {
        self.labels.len()
    }

    pub fn num_turns(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    #[inline]
    pub fn get(&self, slot: usize, turn: usize) -> u8 {
        self.labels[slot][turn]
    }

    #[inline]
    pub fn is_update(&self, slot: usize, turn: usize) -> bool {
        self.labels[slot][turn] == 1
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.labels
    }

    /// Labels flattened turn-major (`t * J + j`), as used by batched model outputs.
    pub fn turn_major(&self) -> Vec<f64> {
        let (j_n, t_n) = (self.num_slots(), self.num_turns());
        let mut out = Vec::with_capacity(j_n * t_n);
        for t in 0..t_n {
            for j in 0..j_n {
                out.push(f64::from(self.labels[j][t]));
            }
        }
        out
    }
}

/// State-operation labels: a slot is "updated" at turn `t` when its value
/// differs from turn `t − 1`, with an all-`"none"` state before the first turn.
pub fn derive_sop_labels(dialogue: &Dialogue, schema: &Schema) -> Result<SopLabelMatrix> {
    let mut labels = vec![vec![0u8; dialogue.turns.len()]; schema.len()];
    let mut prev = schema.empty_state();
    for (t, turn) in dialogue.turns.iter().enumerate() {
        schema
            .check_state(&turn.state)
            .map_err(|e| DsdnError::Schema(format!("dialogue `{}` turn {}: {e}", dialogue.id, t + 1)))?;
        for (j, slot) in schema.slots().iter().enumerate() {
            if turn.state[&slot.name] != prev[&slot.name] {
                labels[j][t] = 1;
            }
        }
        prev = turn.state.clone();
    }
    Ok(SopLabelMatrix { labels })
}
