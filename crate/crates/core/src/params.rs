//! Named parameter tensors grouped by the model component that owns them.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DsdnError, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Component ownership. Trainability is decided per group and per phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    ContextEncoder,
    FixedEncoder,
    TurnAttention,
    DialogueTransformer,
    DialogueAttention,
    TeacherEncoder,
    StudentEncoder,
    TeacherAttention,
    StudentAttention,
    SopHead,
    ProjectionHead,
    ValueHead,
    AuxSopHead,
}

impl Group {
    pub const ALL: [Group; 13] = [
        Group::ContextEncoder,
        Group::FixedEncoder,
        Group::TurnAttention,
        Group::DialogueTransformer,
        Group::DialogueAttention,
        Group::TeacherEncoder,
        Group::StudentEncoder,
        Group::TeacherAttention,
        Group::StudentAttention,
        Group::SopHead,
        Group::ProjectionHead,
        Group::ValueHead,
        Group::AuxSopHead,
    ];

    /// Groups making up the dialogue state distillation module.
    pub const DISTILLATION: [Group; 5] = [
        Group::TeacherEncoder,
        Group::StudentEncoder,
        Group::TeacherAttention,
        Group::StudentAttention,
        Group::SopHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::ContextEncoder => "context_encoder",
            Group::FixedEncoder => "fixed_encoder",
            Group::TurnAttention => "turn_attention",
            Group::DialogueTransformer => "dialogue_transformer",
            Group::DialogueAttention => "dialogue_attention",
            Group::TeacherEncoder => "teacher_encoder",
            Group::StudentEncoder => "student_encoder",
            Group::TeacherAttention => "teacher_attention",
            Group::StudentAttention => "student_attention",
            Group::SopHead => "sop_head",
            Group::ProjectionHead => "projection_head",
            Group::ValueHead => "value_head",
            Group::AuxSopHead => "aux_sop_head",
        }
    }

    pub fn is_distillation(self) -> bool {
        Self::DISTILLATION.contains(&self)
    }

    fn bit(self) -> u32 {
        1 << (self as u32)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A set of groups, used to say which parameters receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupSet(u32);

impl GroupSet {
    pub fn empty() -> Self {
        GroupSet(0)
    }

    pub fn all() -> Self {
        Group::ALL.iter().copied().collect()
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn with(mut self, g: Group) -> Self {
        self.0 |= g.bit();
        self
    }

    pub fn without(mut self, g: Group) -> Self {
        self.0 &= !g.bit();
        self
    }

    pub fn iter(self) -> impl Iterator<Item = Group> {
        Group::ALL.into_iter().filter(move |g| self.contains(*g))
    }
}

impl FromIterator<Group> for GroupSet {
    fn from_iter<I: IntoIterator<Item = Group>>(iter: I) -> Self {
        iter.into_iter().fold(GroupSet::empty(), GroupSet::with)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; names are assigned by model construction code.
    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Matrix) -> ParamId {
        let name = name.into();
        let id = ParamId(self.params.len());
        let prev = self.index.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, group, value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, groups: GroupSet) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| groups.contains(p.group))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_scalars(&self, groups: GroupSet) -> usize {
        self.params
            .iter()
            .filter(|p| groups.contains(p.group))
            .map(|p| p.value.len())
            .sum()
    }

    /// Overwrites values from `(name, matrix)` pairs; every stored parameter must be covered.
    pub fn load_values(&mut self, values: Vec<(String, Matrix)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, m) in values {
            let id = self
                .id(&name)
                .ok_or_else(|| DsdnError::Checkpoint(format!("unknown parameter `{name}`")))?;
            let slot = &mut self.params[id.0];
            if slot.value.shape() != m.shape() {
                return Err(DsdnError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    m.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = m;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(DsdnError::Checkpoint(format!(
                "missing parameter `{}`",
                self.params[i].name
            )));
        }
        Ok(())
    }
}

/// Per-parameter gradient buffers, indexed like the store.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn new(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn add_all(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Matrix::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}
