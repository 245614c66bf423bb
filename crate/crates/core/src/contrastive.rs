//! Inter-slot supervised contrastive learning.
//!
//! Anchors are `(slot, turn)` cells whose SOP label is 1. Positives are other
//! slots updated in the same turn; negatives are the non-updated slots of that
//! turn and the anchor slot at every other turn of the same dialogue.
//! Similarities are cosine similarities of projected features divided by a
//! temperature.
//!
//! Feature matrices are turn-major: row `t * J + j` holds slot `j` at turn `t`.

use crate::autograd::{log_sum_exp, ContrastiveAnchor, Graph, Var};
use crate::corpus::SopLabelMatrix;
use crate::error::{DsdnError, Result};
use crate::nn::{Linear, ParamBuilder};
use crate::params::Group;
use crate::tensor::{dot, Matrix};

/// A `(slot, turn)` cell, both zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AnchorIndex {
    pub slot: usize,
    pub turn: usize,
}

impl AnchorIndex {
    pub fn new(slot: usize, turn: usize) -> Self {
        Self { slot, turn }
    }

    /// Row of this cell in a turn-major feature matrix over `n_slots` slots.
    pub fn row(self, n_slots: usize) -> usize {
        self.turn * n_slots + self.slot
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleSets {
    pub positives: Vec<AnchorIndex>,
    pub negatives_turn: Vec<AnchorIndex>,
    pub negatives_dialogue: Vec<AnchorIndex>,
}

impl SampleSets {
    /// Denominator index set for `variant`.
    pub fn index_set(&self, variant: ClVariant) -> Vec<AnchorIndex> {
        let mut out = self.positives.clone();
        out.extend(&self.negatives_turn);
        if variant == ClVariant::Full {
            out.extend(&self.negatives_dialogue);
        }
        out
    }
}

/// Which negatives enter the denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClVariant {
    /// Turn-level and dialogue-level negatives.
    Full,
    /// Turn-level negatives only.
    WithoutDialogueNegatives,
}

pub fn select_samples(labels: &SopLabelMatrix, anchor: AnchorIndex) -> Result<SampleSets> {
    let (n_slots, n_turns) = (labels.num_slots(), labels.num_turns());
    if anchor.slot >= n_slots || anchor.turn >= n_turns {
        return Err(DsdnError::Argument(format!(
            "anchor {anchor:?} outside a {n_slots}×{n_turns} label matrix"
        )));
    }
    if !labels.is_update(anchor.slot, anchor.turn) {
        return Err(DsdnError::Argument(format!(
            "anchor {anchor:?} has SOP label 0; only updated cells can be anchors"
        )));
    }
    let mut sets = SampleSets::default();
    for j in (0..n_slots).filter(|&j| j != anchor.slot) {
        let cell = AnchorIndex::new(j, anchor.turn);
        if labels.is_update(j, anchor.turn) {
            sets.positives.push(cell);
        } else {
            sets.negatives_turn.push(cell);
        }
    }
    sets.negatives_dialogue = (0..n_turns)
        .filter(|&t| t != anchor.turn)
        .map(|t| AnchorIndex::new(anchor.slot, t))
        .collect();
    Ok(sets)
}

/// Every anchor of `labels` with a nonempty positive set, with its samples.
pub fn anchors_with_positives(labels: &SopLabelMatrix) -> Vec<(AnchorIndex, SampleSets)> {
    let mut out = Vec::new();
    for t in 0..labels.num_turns() {
        for j in 0..labels.num_slots() {
            if !labels.is_update(j, t) {
                continue;
            }
            let anchor = AnchorIndex::new(j, t);
            let sets = select_samples(labels, anchor).expect("anchor is an update cell");
            if !sets.positives.is_empty() {
                out.push((anchor, sets));
            }
        }
    }
    out
}

/// `c = f + r_stu`.
pub fn integrate(f: &[f64], r_stu: &[f64]) -> Result<Vec<f64>> {
    if f.len() != r_stu.len() {
        return Err(DsdnError::Argument(format!(
            "cannot integrate features of width {} and {}",
            f.len(),
            r_stu.len()
        )));
    }
    Ok(f.iter().zip(r_stu).map(|(a, b)| a + b).collect())
}

/// `z = W³ ReLU(W⁴ c)`; `W⁴ ∈ R^{d₂×d}`, `W³ ∈ R^{d₁×d₂}`, no biases.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub w3: Linear,
    pub w4: Linear,
}

impl ProjectionHead {
    pub fn new(b: &mut ParamBuilder, d_model: usize, d1: usize, d2: usize) -> Self {
        Self {
            w4: Linear::new(b, "projection_head.w4", Group::ProjectionHead, d_model, d2, false),
            w3: Linear::new(b, "projection_head.w3", Group::ProjectionHead, d2, d1, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, c: Var) -> Var {
        let h = self.w4.forward(g, c);
        let h = g.relu(h);
        self.w3.forward(g, h)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(DsdnError::Config(format!("temperature tau={tau} must be positive")))
    }
}

fn check_z_shape(z: &Matrix, labels: &SopLabelMatrix) -> Result<()> {
    let cells = labels.num_slots() * labels.num_turns();
    if z.rows() != cells {
        return Err(DsdnError::Argument(format!(
            "{} projected rows for {} (slot, turn) cells",
            z.rows(),
            cells
        )));
    }
    Ok(())
}

fn check_participants(z: &Matrix, n_slots: usize, anchors: &[(AnchorIndex, SampleSets)], variant: ClVariant) -> Result<()> {
    for (anchor, sets) in anchors {
        for cell in std::iter::once(*anchor).chain(sets.index_set(variant)) {
            let row = z.row(cell.row(n_slots));
            if dot(row, row) == 0.0 {
                return Err(DsdnError::Numeric(format!(
                    "projected vector of slot {} at turn {} has zero norm; cosine similarity undefined",
                    cell.slot, cell.turn
                )));
            }
        }
    }
    Ok(())
}

/// NT-Xent over one dialogue's projected vectors (`T·J × d₁`, turn-major),
/// normalized by `T·J`.
pub fn nt_xent_loss(z: &Matrix, labels: &SopLabelMatrix, tau: f64, variant: ClVariant) -> Result<f64> {
    check_tau(tau)?;
    check_z_shape(z, labels)?;
    let n_slots = labels.num_slots();
    let anchors = anchors_with_positives(labels);
    check_participants(z, n_slots, &anchors, variant)?;
    let norms: Vec<f64> = (0..z.rows()).map(|r| dot(z.row(r), z.row(r)).sqrt()).collect();
    let sim = |a: usize, b: usize| dot(z.row(a), z.row(b)) / (norms[a] * norms[b]) / tau;
    let mut total = 0.0;
    for (anchor, sets) in &anchors {
        let a = anchor.row(n_slots);
        let denom: Vec<f64> = sets
            .index_set(variant)
            .iter()
            .map(|c| sim(a, c.row(n_slots)))
            .collect();
        let lse = log_sum_exp(&denom);
        let pos: f64 = sets.positives.iter().map(|p| sim(a, p.row(n_slots)) - lse).sum();
        total -= pos / sets.positives.len() as f64;
    }
    Ok(total / z.rows() as f64)
}

/// Differentiable form of [`nt_xent_loss`] over a projected node `z`.
pub fn nt_xent_graph(g: &mut Graph, z: Var, labels: &SopLabelMatrix, tau: f64, variant: ClVariant) -> Result<Var> {
    check_tau(tau)?;
    check_z_shape(g.value(z), labels)?;
    let n_slots = labels.num_slots();
    let anchors = anchors_with_positives(labels);
    check_participants(g.value(z), n_slots, &anchors, variant)?;
    let cells = g.shape(z).0;
    let unit = g.row_normalize(z);
    let cos = g.matmul_bt(unit, unit);
    let logits = g.scale(cos, 1.0 / tau);
    let anchors = anchors
        .into_iter()
        .map(|(a, sets)| ContrastiveAnchor {
            row: a.row(n_slots),
            positives: sets.positives.iter().map(|p| p.row(n_slots)).collect(),
            denominators: sets.index_set(variant).iter().map(|c| c.row(n_slots)).collect(),
        })
        .collect();
    Ok(g.contrastive_nll(logits, anchors, 1.0 / cells as f64))
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}
