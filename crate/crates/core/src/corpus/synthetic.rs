//! Template-based synthetic dialogues with controllable slot co-update structure.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_sop_labels, Dialogue, Schema, SlotDef, Turn, NONE_VALUE};
use crate::error::{DsdnError, Result};

const MAX_TURNS: usize = 8;
const NO_UPDATE_PROB: f64 = 0.15;
const CONFIRM_PROB: f64 = 0.4;

const OPENERS: &[&str] = &["", "hello ,", "yes ,", "also ,", "actually ,", "okay ,"];

/// `{slot}` is replaced by the slot phrase, `{value}` by the value.
const CLAUSES: &[&str] = &[
    "i want the {slot} to be {value}",
    "set the {slot} to {value}",
    "the {slot} should be {value}",
    "make the {slot} {value} please",
    "{value} for the {slot}",
    "please use {value} as the {slot}",
    "i would like {value} for the {slot}",
    "change the {slot} to {value}",
];

const CONNECTORS: &[&str] = &["and", ", and also", "and then"];

const IDLE_USER: &[&str] = &[
    "that sounds good",
    "thank you very much",
    "what options do i have ?",
    "can you check that for me ?",
    "no , that is all for now",
];

const SYSTEM_GENERIC: &[&str] = &[
    "sure , anything else ?",
    "i have noted that .",
    "what else do you need ?",
    "is there anything else i can help with ?",
    "let me check that for you .",
    "certainly .",
];

const SYSTEM_CONFIRM: &[&str] = &["okay , the {slot} is {value} .", "got it , {value} for the {slot} ."];

/// Every sentence skeleton the generator can emit.
pub fn template_skeletons() -> Vec<&'static str> {
    [OPENERS, CLAUSES, CONNECTORS, IDLE_USER, SYSTEM_GENERIC, SYSTEM_CONFIRM]
        .iter()
        .flat_map(|s| s.iter().copied())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Six-slot hotel/train/restaurant ontology used by the examples and tests.
pub fn toy_schema() -> Schema {
    let days = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"];
    let slot = |name: &str, values: &[&str]| SlotDef {
        name: name.to_string(),
        values: std::iter::once(NONE_VALUE)
            .chain(values.iter().copied())
            .map(str::to_string)
            .collect(),
    };
    Schema::new(vec![
        slot("hotel-book day", &days),
        slot("hotel-book stay", &["1", "2", "3", "4", "5"]),
        slot("hotel-pricerange", &["cheap", "moderate", "expensive"]),
        slot("train-day", &days),
        slot("train-departure", &["cambridge", "london", "ely", "norwich", "stevenage"]),
        slot("restaurant-food", &["italian", "chinese", "indian", "british"]),
    ])
    .expect("toy schema is valid")
}

/// Counts attached to a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub n_dialogues: usize,
    pub n_turns: usize,
    pub coupdate: Vec<CoupdateRate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupdateRate {
    pub slots: (String, String),
    /// Turns where at least one of the two slots is updated.
    pub turns_with_update: usize,
    /// Turns where both are updated.
    pub turns_with_both: usize,
    /// `turns_with_both / turns_with_update`, absent when neither slot ever updates.
    pub rate: Option<f64>,
}

impl CorpusManifest {
    /// Derives the co-update counts from the SOP labels of `dialogues`.
    pub fn measure(
        dialogues: &[Dialogue],
        schema: &Schema,
        seed: u64,
        pairs: &[(String, String)],
    ) -> Result<Self> {
        let idx = resolve_pairs(schema, pairs)?;
        let mut counts = vec![(0usize, 0usize); idx.len()];
        let mut n_turns = 0;
        for d in dialogues {
            let labels = derive_sop_labels(d, schema)?;
            n_turns += d.len();
            for t in 0..d.len() {
                for (c, &(a, b)) in counts.iter_mut().zip(&idx) {
                    let (ua, ub) = (labels.is_update(a, t), labels.is_update(b, t));
                    if ua || ub {
                        c.0 += 1;
                    }
                    if ua && ub {
                        c.1 += 1;
                    }
                }
            }
        }
        let coupdate = pairs
            .iter()
            .zip(counts)
            .map(|(p, (any, both))| CoupdateRate {
                slots: p.clone(),
                turns_with_update: any,
                turns_with_both: both,
                rate: (any > 0).then(|| both as f64 / any as f64),
            })
            .collect();
        Ok(Self {
            seed,
            n_dialogues: dialogues.len(),
            n_turns,
            coupdate,
        })
    }
}

fn resolve_pairs(schema: &Schema, pairs: &[(String, String)]) -> Result<Vec<(usize, usize)>> {
    pairs
        .iter()
        .map(|(a, b)| {
            let ia = schema
                .slot_index(a)
                .ok_or_else(|| DsdnError::Argument(format!("co-update slot `{a}` is not in the schema")))?;
            let ib = schema
                .slot_index(b)
                .ok_or_else(|| DsdnError::Argument(format!("co-update slot `{b}` is not in the schema")))?;
            if ia == ib {
                return Err(DsdnError::Argument(format!("co-update pair repeats slot `{a}`")));
            }
            Ok((ia, ib))
        })
        .collect()
}

/// Groups slots into update units: the connected components of the co-update pairs.
fn update_units(n_slots: usize, pairs: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n_slots).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        parent[x] = r;
        r
    }
    for &(a, b) in pairs {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut units: Vec<Vec<usize>> = Vec::new();
    let mut root_unit = vec![usize::MAX; n_slots];
    for j in 0..n_slots {
        let r = find(&mut parent, j);
        if root_unit[r] == usize::MAX {
            root_unit[r] = units.len();
            units.push(Vec::new());
        }
        units[root_unit[r]].push(j);
    }
    units
}

fn phrase(slot: &SlotDef) -> String {
    slot.name.replace('-', " ")
}

fn fill(template: &str, slot: &SlotDef, value: &str) -> String {
    template.replace("{slot}", &phrase(slot)).replace("{value}", value)
}

/// Generates `n_dialogues` dialogues of 1–8 turns. Slots in a co-update pair
/// always change value in the same turn; all other slots change independently.
/// Output is a pure function of the arguments.
pub fn generate_synthetic_corpus(
    schema: &Schema,
    n_dialogues: usize,
    seed: u64,
    coupdate_pairs: &[(String, String)],
) -> Result<Vec<Dialogue>> {
    if n_dialogues == 0 {
        return Err(DsdnError::Argument("n_dialogues must be positive".into()));
    }
    let pairs = resolve_pairs(schema, coupdate_pairs)?;
    let units = update_units(schema.len(), &pairs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dialogues = Vec::with_capacity(n_dialogues);
    for i in 0..n_dialogues {
        let n_turns = rng.random_range(1..=MAX_TURNS);
        let mut state = schema.empty_state();
        let mut turns = Vec::with_capacity(n_turns);
        for _ in 0..n_turns {
            let mut updated: Vec<usize> = Vec::new();
            if rng.random::<f64>() >= NO_UPDATE_PROB {
                let k = rng.random_range(1..=2).min(units.len());
                let chosen: Vec<&Vec<usize>> = units.choose_multiple(&mut rng, k).collect();
                for unit in chosen {
                    updated.extend(unit.iter().copied());
                }
            }
            let mut realized = Vec::new();
            for &j in &updated {
                let slot = schema.slot(j);
                let current = &state[&slot.name];
                let options: Vec<&String> = slot
                    .values
                    .iter()
                    .filter(|v| v.as_str() != NONE_VALUE && *v != current)
                    .collect();
                if let Some(v) = options.choose(&mut rng) {
                    state.insert(slot.name.clone(), (*v).clone());
                    realized.push((j, (*v).clone()));
                }
            }
            realized.shuffle(&mut rng);
            let user = if realized.is_empty() {
                IDLE_USER.choose(&mut rng).expect("nonempty").to_string()
            } else {
                let mut parts = Vec::new();
                let opener = OPENERS.choose(&mut rng).expect("nonempty");
                if !opener.is_empty() {
                    parts.push(opener.to_string());
                }
                for (n, (j, v)) in realized.iter().enumerate() {
                    if n > 0 {
                        parts.push(CONNECTORS.choose(&mut rng).expect("nonempty").to_string());
                    }
                    let clause = CLAUSES.choose(&mut rng).expect("nonempty");
                    parts.push(fill(clause, schema.slot(*j), v));
                }
                parts.join(" ")
            };
            let system = match realized.first() {
                Some((j, v)) if rng.random::<f64>() < CONFIRM_PROB => {
                    fill(SYSTEM_CONFIRM.choose(&mut rng).expect("nonempty"), schema.slot(*j), v)
                }
                _ => SYSTEM_GENERIC.choose(&mut rng).expect("nonempty").to_string(),
            };
            turns.push(Turn {
                user,
                system,
                state: state.clone(),
            });
        }
        dialogues.push(Dialogue {
            id: format!("syn-{seed}-{i:05}"),
            turns,
        });
    }
    Ok(dialogues)
}
