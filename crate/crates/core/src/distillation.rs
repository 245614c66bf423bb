//! Dialogue state distillation: a teacher encoder that reads the gold previous
//! dialogue state and predicts state operations, and a student encoder that
//! reads only slot names and is trained to reproduce the teacher's attended
//! context features.
//!
//! Only the student path exists at inference time.

use crate::autograd::{bce_mean, Graph, Var};
use crate::corpus::{DialogueState, Schema, SopLabelMatrix};
use crate::error::{DsdnError, Result};
use crate::nn::{AttnMask, BaseEncoder, Linear, MultiHeadAttention, ParamBuilder};
use crate::params::Group;
use crate::tensor::Matrix;
use crate::tokenizer::{TokenSequence, Vocab, CLS, DASH, SEP};

/// `[CLS] ⊕ SV_1 … SV_J ⊕ [SEP]` with `SV_j = [SLOT_j^tea] s_j - v_j^{t−1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeacherInput {
    pub tokens: TokenSequence,
    /// Position of each `[SLOT_j^tea]` marker, in schema order.
    pub slot_positions: Vec<usize>,
}

/// `[CLS] ⊕ S_1 … S_J ⊕ [SEP]` with `S_j = [SLOT_j^stu] s_j`. Identical at every turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StudentInput {
    pub tokens: TokenSequence,
    pub slot_positions: Vec<usize>,
}

pub fn build_teacher_input(vocab: &Vocab, schema: &Schema, prev_state: &DialogueState) -> Result<TeacherInput> {
    let mut ids = vec![CLS];
    let mut slot_positions = Vec::with_capacity(schema.len());
    for (j, slot) in schema.slots().iter().enumerate() {
        let value = prev_state
            .get(&slot.name)
            .ok_or_else(|| DsdnError::Schema(format!("previous state has no value for slot `{}`", slot.name)))?;
        slot_positions.push(ids.len());
        ids.push(vocab.teacher_marker(j));
        ids.extend(vocab.tokenize(&slot.name));
        ids.push(DASH);
        ids.extend(vocab.tokenize(value));
    }
    ids.push(SEP);
    Ok(TeacherInput {
        tokens: TokenSequence::new(ids),
        slot_positions,
    })
}

pub fn build_student_input(vocab: &Vocab, schema: &Schema) -> StudentInput {
    let mut ids = vec![CLS];
    let mut slot_positions = Vec::with_capacity(schema.len());
    for (j, slot) in schema.slots().iter().enumerate() {
        slot_positions.push(ids.len());
        ids.push(vocab.student_marker(j));
        ids.extend(vocab.tokenize(&slot.name));
    }
    ids.push(SEP);
    StudentInput {
        tokens: TokenSequence::new(ids),
        slot_positions,
    }
}

/// Longest possible teacher input for `schema` under `vocab`.
pub fn teacher_capacity(vocab: &Vocab, schema: &Schema) -> usize {
    2 + schema
        .slots()
        .iter()
        .map(|s| {
            let longest = s.values.iter().map(|v| vocab.tokenize(v).len()).max().unwrap_or(0);
            2 + vocab.tokenize(&s.name).len() + longest
        })
        .sum::<usize>()
}

pub fn student_capacity(vocab: &Vocab, schema: &Schema) -> usize {
    2 + schema
        .slots()
        .iter()
        .map(|s| 1 + vocab.tokenize(&s.name).len())
        .sum::<usize>()
}

/// `p = σ(W¹ tanh(W² r))`, no biases; `W¹ ∈ R^{1×d}`, `W² ∈ R^{d×d}`.
#[derive(Clone, Debug)]
pub struct SopHead {
    pub w1: Linear,
    pub w2: Linear,
}

impl SopHead {
    pub fn new(b: &mut ParamBuilder, name: &str, group: Group, d_model: usize) -> Self {
        Self {
            w2: Linear::new(b, &format!("{name}.w2"), group, d_model, d_model, false),
            w1: Linear::new(b, &format!("{name}.w1"), group, d_model, 1, false),
        }
    }

    /// One probability per row of `features` (`n × 1`).
    pub fn forward(&self, g: &mut Graph, features: Var) -> Var {
        let h = self.w2.forward(g, features);
        let h = g.tanh(h);
        let logit = self.w1.forward(g, h);
        g.sigmoid(logit)
    }
}

/// Teacher and student encoders, their context attentions, and the SOP head.
#[derive(Clone, Debug)]
pub struct DistillationModule {
    pub teacher_encoder: BaseEncoder,
    pub student_encoder: BaseEncoder,
    pub teacher_attention: MultiHeadAttention,
    pub student_attention: MultiHeadAttention,
    pub sop_head: SopHead,
}

/// Teacher outputs for one turn.
#[derive(Clone, Copy, Debug)]
pub struct TeacherOutput {
    /// `h^tea_{j,t}` (`J × d`).
    pub slot_states: Var,
    /// `r^tea_{j,t}` (`J × d`).
    pub features: Var,
    /// `p^sop_{j,t}` (`J × 1`).
    pub sop: Var,
}

impl DistillationModule {
    /// Teacher path for turn `t`: encode the gold turn-`(t−1)` state, read the
    /// slot markers, attend over the turn's context, predict state operations.
    pub fn teacher_forward(
        &self,
        g: &mut Graph,
        input: &TeacherInput,
        context: Var,
        context_mask: Option<&AttnMask>,
    ) -> Result<TeacherOutput> {
        let hidden = self.teacher_encoder.forward(g, &input.tokens)?;
        let slot_states = g.gather_rows(hidden, &input.slot_positions);
        let features = self
            .teacher_attention
            .forward(g, slot_states, context, context, context_mask);
        let sop = self.sop_head.forward(g, features);
        Ok(TeacherOutput {
            slot_states,
            features,
            sop,
        })
    }

    /// `h^stu_j` for every slot (`J × d`); turn-independent.
    pub fn student_slot_states(&self, g: &mut Graph, input: &StudentInput) -> Result<Var> {
        let hidden = self.student_encoder.forward(g, &input.tokens)?;
        Ok(g.gather_rows(hidden, &input.slot_positions))
    }

    /// `r^stu_{j,t}` (`J × d`) from the student's slot states and the turn context.
    pub fn student_forward(
        &self,
        g: &mut Graph,
        slot_states: Var,
        context: Var,
        context_mask: Option<&AttnMask>,
    ) -> Var {
        self.student_attention
            .forward(g, slot_states, context, context, context_mask)
    }
}

/// Mean binary cross-entropy over all `(j, t)` cells. `probs` is `J × T`.
/// Probabilities are clamped to `[1e-7, 1 − 1e-7]`; values outside `[0, 1]`
/// are rejected.
pub fn sop_loss(probs: &Matrix, labels: &SopLabelMatrix) -> Result<f64> {
    if probs.shape() != (labels.num_slots(), labels.num_turns()) {
        return Err(DsdnError::Argument(format!(
            "SOP probabilities {:?} do not match labels {:?}",
            probs.shape(),
            (labels.num_slots(), labels.num_turns())
        )));
    }
    if let Some(p) = probs.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(DsdnError::Numeric(format!("SOP probability {p} outside [0, 1]")));
    }
    let y: Vec<f64> = labels.rows().iter().flatten().map(|&v| f64::from(v)).collect();
    Ok(bce_mean(probs.data(), &y))
}

/// `(1/(T·J)) Σ MSE(r_tea, r_stu)` with the per-pair MSE averaged over features.
/// Each slice element is one turn's `J × d` matrix.
pub fn distill_loss(teacher: &[Matrix], student: &[Matrix]) -> Result<f64> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(DsdnError::Argument(format!(
            "teacher has {} turns, student {}",
            teacher.len(),
            student.len()
        )));
    }
    let mut total = 0.0;
    let mut cells = 0usize;
    for (a, b) in teacher.iter().zip(student) {
        if a.shape() != b.shape() {
            return Err(DsdnError::Argument(format!(
                "feature shapes differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        for r in 0..a.rows() {
            let mse = a
                .row(r)
                .iter()
                .zip(b.row(r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / a.cols() as f64;
            total += mse;
            cells += 1;
        }
    }
    Ok(total / cells as f64)
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(DsdnError::Config(format!("balancing coefficient alpha={alpha} must lie in (0, 1)")))
    }
}

/// `α · l_sop + (1 − α) · l_distill`.
pub fn dsd_loss(l_sop: f64, l_distill: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * l_sop + (1.0 - alpha) * l_distill)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SlotDef;

    fn schema() -> Schema {
        Schema::new(vec![
            SlotDef {
                name: "hotel-area".into(),
                values: vec!["none".into(), "north".into(), "city centre".into()],
            },
            SlotDef {
                name: "hotel-book stay".into(),
                values: vec!["none".into(), "2".into()],
            },
        ])
        .unwrap()
    }

    #[test]
    fn first_turn_teacher_input() {
        let schema = schema();
        let vocab = Vocab::build(&schema, []);
        let input = build_teacher_input(&vocab, &schema, &schema.empty_state()).unwrap();
        assert_eq!(
            vocab.detokenize(&input.tokens.ids),
            "[CLS] [SLOT_1_tea] hotel-area - none [SLOT_2_tea] hotel-book stay - none [SEP]"
        );
        assert_eq!(input.slot_positions, vec![1, 5]);
        assert!(input.tokens.len() <= teacher_capacity(&vocab, &schema));
    }

    #[test]
    fn teacher_input_requires_total_state() {
        let schema = schema();
        let vocab = Vocab::build(&schema, []);
        let mut prev = schema.empty_state();
        prev.remove("hotel-book stay");
        assert!(build_teacher_input(&vocab, &schema, &prev).is_err());
    }

    #[test]
    fn student_input_layout() {
        let schema = schema();
        let vocab = Vocab::build(&schema, []);
        let input = build_student_input(&vocab, &schema);
        assert_eq!(
            vocab.detokenize(&input.tokens.ids),
            "[CLS] [SLOT_1_stu] hotel-area [SLOT_2_stu] hotel-book stay [SEP]"
        );
        assert_eq!(input.tokens.len(), student_capacity(&vocab, &schema));
    }

    #[test]
    fn sop_loss_analytic_values() {
        let labels = SopLabelMatrix::from_rows(vec![vec![1, 0], vec![0, 1]]);
        let half = Matrix::filled(2, 2, 0.5);
        assert!((sop_loss(&half, &labels).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(sop_loss(&perfect, &labels).unwrap() < 1e-6);
        let bad = Matrix::from_rows(&[vec![1.5, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(sop_loss(&bad, &labels), Err(DsdnError::Numeric(_))));
    }

    #[test]
    fn distill_loss_values() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, -1.0, 4.0]]);
        assert_eq!(distill_loss(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 0.0);
        let shifted = a.map(|v| v - 0.3);
        assert!((distill_loss(std::slice::from_ref(&a), &[shifted]).unwrap() - 0.09).abs() < 1e-12);
        assert!(distill_loss(std::slice::from_ref(&a), &[Matrix::zeros(1, 3)]).is_err());
    }

    #[test]
    fn dsd_loss_combination() {
        assert_eq!(dsd_loss(1.0, 1.0, 0.5).unwrap(), 1.0);
        assert!((dsd_loss(2.0, 1.0, 0.8).unwrap() - 1.8).abs() < 1e-12);
        assert!((dsd_loss(2.0, 1.0, 0.6).unwrap() - 1.6).abs() < 1e-12);
        assert!(dsd_loss(1.0, 1.0, 0.0).is_err());
        assert!(dsd_loss(1.0, 1.0, 1.0).is_err());
    }
}
