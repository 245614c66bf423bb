//! JSON Lines dialogue files and JSON schema files.
//!
//! Dialogue file: one dialogue per line,
//! `{"id": str, "turns": [{"user": str, "system": str, "state": {"domain-slot": "value", ...}}, ...]}`.
//! States are cumulative. Slots absent from a turn's state are `"none"`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Dialogue, DialogueState, Schema, Turn, NONE_VALUE};
use crate::error::{DsdnError, Result};

/// What to do with a state value that is not in the slot's candidate set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnknownValuePolicy {
    #[default]
    Reject,
    MapToNone,
    AddToOntology,
}

impl FromStr for UnknownValuePolicy {
    type Err = DsdnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reject" => Ok(Self::Reject),
            "map-to-none" => Ok(Self::MapToNone),
            "add-to-ontology" => Ok(Self::AddToOntology),
            other => Err(DsdnError::Argument(format!("unknown value policy `{other}`"))),
        }
    }
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<Schema> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DsdnError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        if e.is_data() {
            DsdnError::Schema(format!("{}: {e}", path.display()))
        } else {
            DsdnError::Parse {
                path: path.display().to_string(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            }
        }
    })
}

pub fn save_schema(schema: &Schema, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(schema)?;
    fs::write(path, text + "\n").map_err(|e| DsdnError::io(path, e))
}

/// Loads with [`UnknownValuePolicy::Reject`].
pub fn load_dialogues(path: impl AsRef<Path>, schema: &Schema) -> Result<Vec<Dialogue>> {
    let mut schema = schema.clone();
    load_multiwoz_format(path, &mut schema, UnknownValuePolicy::Reject)
}

/// Reads a dialogue JSONL file. Under [`UnknownValuePolicy::AddToOntology`]
/// the schema is extended in place.
pub fn load_multiwoz_format(
    path: impl AsRef<Path>,
    schema: &mut Schema,
    policy: UnknownValuePolicy,
) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DsdnError::io(path, e))?;
    let origin = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_dialogue_line(line, i + 1, &origin, schema, policy)?);
    }
    Ok(out)
}

/// Parses one JSONL line (`line_no` is 1-based, used in error messages).
pub fn parse_dialogue_line(
    line: &str,
    line_no: usize,
    origin: &str,
    schema: &mut Schema,
    policy: UnknownValuePolicy,
) -> Result<Dialogue> {
    let value: Value = serde_json::from_str(line).map_err(|e| DsdnError::Parse {
        path: origin.to_string(),
        line: line_no,
        column: e.column(),
        message: e.to_string(),
    })?;
    let ctx = format!("{origin}:{line_no}");
    let obj = value
        .as_object()
        .ok_or_else(|| DsdnError::Schema(format!("{ctx}: dialogue must be a JSON object")))?;
    let id = str_field(obj, "id", &ctx)?.to_string();
    let turns_json = obj
        .get("turns")
        .ok_or_else(|| missing("turns", &ctx))?
        .as_array()
        .ok_or_else(|| DsdnError::Schema(format!("{ctx}: `turns` must be an array")))?;
    if turns_json.is_empty() {
        return Err(DsdnError::Schema(format!("{ctx}: dialogue `{id}` has no turns")));
    }
    let mut turns = Vec::with_capacity(turns_json.len());
    for (t, tj) in turns_json.iter().enumerate() {
        let tctx = format!("{ctx} dialogue `{id}` turn {}", t + 1);
        let tobj = tj
            .as_object()
            .ok_or_else(|| DsdnError::Schema(format!("{tctx}: turn must be an object")))?;
        let user = str_field(tobj, "user", &tctx)?.to_string();
        let system = str_field(tobj, "system", &tctx)?.to_string();
        let state_json = tobj
            .get("state")
            .ok_or_else(|| missing("state", &tctx))?
            .as_object()
            .ok_or_else(|| DsdnError::Schema(format!("{tctx}: `state` must be an object")))?;
        let mut state: DialogueState = schema.empty_state();
        for (slot, v) in state_json {
            let j = schema
                .slot_index(slot)
                .ok_or_else(|| DsdnError::Schema(format!("{tctx}: unknown slot `{slot}`")))?;
            let v = v
                .as_str()
                .ok_or_else(|| DsdnError::Schema(format!("{tctx}: value of `{slot}` must be a string")))?;
            let resolved = if schema.slot(j).value_index(v).is_some() {
                v.to_string()
            } else {
                match policy {
                    UnknownValuePolicy::Reject => {
                        return Err(DsdnError::Schema(format!(
                            "{tctx}: value `{v}` is not a candidate of slot `{slot}`"
                        )))
                    }
                    UnknownValuePolicy::MapToNone => NONE_VALUE.to_string(),
                    UnknownValuePolicy::AddToOntology => {
                        schema.add_value(j, v.to_string());
                        v.to_string()
                    }
                }
            };
            state.insert(slot.clone(), resolved);
        }
        turns.push(Turn { user, system, state });
    }
    Ok(Dialogue { id, turns })
}

fn missing(field: &str, ctx: &str) -> DsdnError {
    DsdnError::MissingField {
        field: field.to_string(),
        context: ctx.to_string(),
    }
}

fn str_field<'v>(obj: &'v serde_json::Map<String, Value>, field: &str, ctx: &str) -> Result<&'v str> {
    obj.get(field)
        .ok_or_else(|| missing(field, ctx))?
        .as_str()
        .ok_or_else(|| DsdnError::Schema(format!("{ctx}: `{field}` must be a string")))
}

/// Writes dialogues as JSONL (one compact object per line, keys in sorted order).
pub fn save_dialogues(dialogues: &[Dialogue], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| DsdnError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in dialogues {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| DsdnError::io(path, e))?;
    }
    w.flush().map_err(|e| DsdnError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SlotDef;

    fn schema() -> Schema {
        Schema::new(vec![SlotDef {
            name: "train-day".into(),
            values: vec!["none".into(), "friday".into()],
        }])
        .unwrap()
    }

    fn parse(line: &str, schema: &mut Schema, policy: UnknownValuePolicy) -> Result<Dialogue> {
        parse_dialogue_line(line, 3, "mem", schema, policy)
    }

    #[test]
    fn missing_state_names_the_field() {
        let mut s = schema();
        let err = parse(
            r#"{"id":"a","turns":[{"user":"hi","system":""}]}"#,
            &mut s,
            UnknownValuePolicy::Reject,
        )
        .unwrap_err();
        assert!(matches!(err, DsdnError::MissingField { ref field, .. } if field == "state"));
    }

    #[test]
    fn malformed_json_reports_position() {
        let mut s = schema();
        let err = parse(r#"{"id": "a", "turns": [}"#, &mut s, UnknownValuePolicy::Reject).unwrap_err();
        match err {
            DsdnError::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column > 0);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_value_policies() {
        let line = r#"{"id":"a","turns":[{"user":"x","system":"","state":{"train-day":"sunday"}}]}"#;
        let mut s = schema();
        assert!(parse(line, &mut s, UnknownValuePolicy::Reject).is_err());
        let d = parse(line, &mut s, UnknownValuePolicy::MapToNone).unwrap();
        assert_eq!(d.turns[0].state["train-day"], "none");
        let d = parse(line, &mut s, UnknownValuePolicy::AddToOntology).unwrap();
        assert_eq!(d.turns[0].state["train-day"], "sunday");
        assert!(s.slot(0).value_index("sunday").is_some());
    }

    #[test]
    fn absent_slots_default_to_none() {
        let mut s = schema();
        let d = parse(
            r#"{"id":"a","turns":[{"user":"x","system":"","state":{}}]}"#,
            &mut s,
            UnknownValuePolicy::Reject,
        )
        .unwrap();
        assert_eq!(d.turns[0].state["train-day"], "none");
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("map-to-none".parse::<UnknownValuePolicy>().unwrap(), UnknownValuePolicy::MapToNone);
        assert!("ignore".parse::<UnknownValuePolicy>().is_err());
    }
}
