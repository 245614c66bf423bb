//! The full tracker: context encoder, frozen slot/value encoder, multi-level
//! slot attention, distillation branch, projection head, and value decoder.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::contrastive::{nt_xent_graph, ClVariant, ProjectionHead};
use crate::corpus::{derive_sop_labels, Dialogue, DialogueState, Schema, SopLabelMatrix};
use crate::decoder::{argmax, value_distribution, value_nll_graph, ValueHead};
use crate::distillation::{
    build_student_input, build_teacher_input, check_alpha, student_capacity, teacher_capacity, DistillationModule,
    SopHead, StudentInput, TeacherInput, TeacherOutput,
};
use crate::encoder_stack::{fuse_features, turn_level_slot_attention, DialogueLevelAttention};
use crate::error::{DsdnError, Result};
use crate::nn::{BaseEncoder, EncoderDims, MultiHeadAttention, ParamBuilder};
use crate::params::{Group, GroupSet, ParamStore};
use crate::tensor::Matrix;
use crate::tokenizer::{TokenSequence, Vocab};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_out: usize,
    pub n_heads: usize,
    /// Transformer layers inside each base encoder.
    pub base_layers: usize,
    /// Layers of the turn-sequence transformer.
    pub dialogue_layers: usize,
    pub d_ff: Option<usize>,
    pub d1: Option<usize>,
    pub d2: Option<usize>,
    pub max_context_len: usize,
    pub max_turns: usize,
    /// Gain on the frozen encoder's `[CLS]` vectors (slot queries and
    /// candidate values). At random initialization candidates of one slot sit
    /// only about one unit apart, which caps the distance-softmax margin.
    pub fixed_output_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_out: 64,
            n_heads: 4,
            base_layers: 2,
            dialogue_layers: 6,
            d_ff: None,
            d1: None,
            d2: None,
            max_context_len: 128,
            max_turns: 32,
            fixed_output_gain: 8.0,
        }
    }
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_out)
    }

    pub fn d1(&self) -> usize {
        self.d1.unwrap_or(4 * self.d_out)
    }

    pub fn d2(&self) -> usize {
        self.d2.unwrap_or(4 * self.d_out)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_out", self.d_out),
            ("n_heads", self.n_heads),
            ("base_layers", self.base_layers),
            ("dialogue_layers", self.dialogue_layers),
            ("d_ff", self.d_ff()),
            ("d1", self.d1()),
            ("d2", self.d2()),
            ("max_turns", self.max_turns),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(DsdnError::Config(format!("{field} must be positive")));
            }
        }
        if !(self.fixed_output_gain.is_finite() && self.fixed_output_gain > 0.0) {
            return Err(DsdnError::Config("fixed_output_gain must be positive and finite".into()));
        }
        if !self.d_out.is_multiple_of(self.n_heads) {
            return Err(DsdnError::Config(format!(
                "d_out={} is not divisible by n_heads={}",
                self.d_out, self.n_heads
            )));
        }
        if self.max_context_len < 3 {
            return Err(DsdnError::Config("max_context_len must be at least 3".into()));
        }
        Ok(())
    }
}

/// Auxiliary objective of the second training phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClMode {
    None,
    /// Binary cross-entropy SOP prediction from the integrated slot features.
    CrossEntropy,
    /// Contrastive loss without dialogue-level negatives.
    ContrastiveMinus,
    #[default]
    Contrastive,
}

impl ClMode {
    pub const ALL: [ClMode; 4] = [ClMode::None, ClMode::CrossEntropy, ClMode::ContrastiveMinus, ClMode::Contrastive];

    pub fn as_str(self) -> &'static str {
        match self {
            ClMode::None => "none",
            ClMode::CrossEntropy => "cross_entropy",
            ClMode::ContrastiveMinus => "contrastive_minus",
            ClMode::Contrastive => "contrastive",
        }
    }
}

impl std::str::FromStr for ClMode {
    type Err = DsdnError;

    fn from_str(s: &str) -> Result<Self> {
        ClMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| DsdnError::Argument(format!("unknown cl mode `{s}`")))
    }
}

impl std::fmt::Display for ClMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Loss switches and coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub distillation_on: bool,
    pub cl_mode: ClMode,
    pub alpha: f64,
    pub tau: f64,
    pub stop_teacher_grad: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            distillation_on: true,
            cl_mode: ClMode::Contrastive,
            alpha: 0.8,
            tau: 0.01,
            stop_teacher_grad: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Value loss plus the distillation objective.
    One,
    /// Value loss plus the configured auxiliary objective, distillation frozen.
    Two,
}

impl Phase {
    /// Parameter groups that receive updates in this phase.
    pub fn trainable(self) -> GroupSet {
        match self {
            Phase::One => GroupSet::all()
                .without(Group::FixedEncoder)
                .without(Group::ProjectionHead)
                .without(Group::AuxSopHead),
            Phase::Two => Group::DISTILLATION
                .into_iter()
                .fold(GroupSet::all().without(Group::FixedEncoder), |s, g| s.without(g)),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

/// Tokenized, label-annotated form of one dialogue.
#[derive(Clone, Debug)]
pub struct PreparedDialogue {
    pub id: String,
    pub contexts: Vec<TokenSequence>,
    /// Teacher inputs built from the gold previous states.
    pub teacher_inputs: Vec<TeacherInput>,
    /// `gold[t][j]`: candidate index of slot `j`'s gold value at turn `t`.
    pub gold: Vec<Vec<usize>>,
    pub sop: SopLabelMatrix,
}

impl PreparedDialogue {
    pub fn num_turns(&self) -> usize {
        self.contexts.len()
    }
}

/// Graph handles of one dialogue's forward pass, one entry per turn.
#[derive(Clone, Debug, Default)]
pub struct ForwardOutput {
    pub turn_features: Vec<Var>,
    pub dialogue_features: Vec<Var>,
    pub fused: Vec<Var>,
    /// Empty when distillation is off.
    pub student: Vec<Var>,
    /// Empty unless the teacher was requested.
    pub teacher: Vec<TeacherOutput>,
    pub integrated: Vec<Var>,
    pub value_repr: Vec<Var>,
}

/// Scalar loss components of one dialogue; unused terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub value: f64,
    pub sop: f64,
    pub distill: f64,
    pub aux: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TurnPrediction {
    pub state: DialogueState,
    pub value_indices: Vec<usize>,
    /// Per-slot update probability, when available.
    pub sop: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct DsdnModel {
    pub config: ModelConfig,
    pub schema: Schema,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub context_encoder: BaseEncoder,
    pub fixed_encoder: BaseEncoder,
    pub turn_attention: MultiHeadAttention,
    pub dialogue_attention: DialogueLevelAttention,
    pub distillation: DistillationModule,
    pub projection: ProjectionHead,
    pub value_head: ValueHead,
    pub aux_sop_head: SopHead,
    student_input: StudentInput,
    slot_vectors: Matrix,
    value_vectors: Vec<Matrix>,
}

const MAX_FIXED_RESEEDS: u64 = 16;

impl DsdnModel {
    pub fn new(config: ModelConfig, schema: Schema, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.num_slots() != schema.len() {
            return Err(DsdnError::Config(format!(
                "vocabulary built for {} slots, schema has {}",
                vocab.num_slots(),
                schema.len()
            )));
        }
        check_distinct_candidates(&schema, &vocab)?;
        for attempt in 0..MAX_FIXED_RESEEDS {
            let model = Self::build(config.clone(), schema.clone(), vocab.clone(), seed, attempt)?;
            if model.value_vectors_distinct() {
                return Ok(model);
            }
            log::warn!("fixed encoder produced colliding value vectors; reseeding (attempt {attempt})");
        }
        Err(DsdnError::Numeric("fixed encoder keeps producing colliding value vectors".into()))
    }

    fn build(config: ModelConfig, schema: Schema, vocab: Vocab, seed: u64, fixed_reseed: u64) -> Result<Self> {
        let d = config.d_out;
        let base = |max_len| EncoderDims {
            vocab_size: vocab.size(),
            max_len,
            d_model: d,
            n_heads: config.n_heads,
            n_layers: config.base_layers,
            d_ff: config.d_ff(),
        };
        let fixed_len = 2 + schema
            .slots()
            .iter()
            .flat_map(|s| std::iter::once(&s.name).chain(&s.values))
            .map(|text| vocab.tokenize(text).len())
            .max()
            .unwrap_or(0);
        let mut store = ParamStore::new();
        let fixed_encoder = {
            let mut b = ParamBuilder::new(&mut store, seed ^ 0x5eed_f1ed_0000_0000 ^ fixed_reseed);
            BaseEncoder::new(&mut b, "fixed_encoder", Group::FixedEncoder, base(fixed_len))?
        };
        let mut b = ParamBuilder::new(&mut store, seed);
        let context_encoder = BaseEncoder::new(&mut b, "context_encoder", Group::ContextEncoder, base(config.max_context_len))?;
        let turn_attention = MultiHeadAttention::new(&mut b, "turn_attention", Group::TurnAttention, d, config.n_heads)?;
        let dialogue_attention =
            DialogueLevelAttention::new(&mut b, config.dialogue_layers, d, config.n_heads, config.d_ff(), config.max_turns)?;
        let distillation = DistillationModule {
            teacher_encoder: BaseEncoder::new(
                &mut b,
                "teacher_encoder",
                Group::TeacherEncoder,
                base(teacher_capacity(&vocab, &schema)),
            )?,
            student_encoder: BaseEncoder::new(
                &mut b,
                "student_encoder",
                Group::StudentEncoder,
                base(student_capacity(&vocab, &schema)),
            )?,
            teacher_attention: MultiHeadAttention::new(&mut b, "teacher_attention", Group::TeacherAttention, d, config.n_heads)?,
            student_attention: MultiHeadAttention::new(&mut b, "student_attention", Group::StudentAttention, d, config.n_heads)?,
            sop_head: SopHead::new(&mut b, "sop_head", Group::SopHead, d),
        };
        let projection = ProjectionHead::new(&mut b, d, config.d1(), config.d2());
        let value_head = ValueHead::new(&mut b, d);
        let aux_sop_head = SopHead::new(&mut b, "aux_sop_head", Group::AuxSopHead, d);
        let student_input = build_student_input(&vocab, &schema);
        let mut model = Self {
            config,
            schema,
            vocab,
            store,
            context_encoder,
            fixed_encoder,
            turn_attention,
            dialogue_attention,
            distillation,
            projection,
            value_head,
            aux_sop_head,
            student_input,
            slot_vectors: Matrix::zeros(0, d),
            value_vectors: Vec::new(),
        };
        model.refresh_fixed_vectors()?;
        Ok(model)
    }

    /// Same architecture as [`DsdnModel::new`] with parameter values taken from `values`.
    pub fn from_values(
        config: ModelConfig,
        schema: Schema,
        vocab: Vocab,
        values: Vec<(String, Matrix)>,
    ) -> Result<Self> {
        config.validate()?;
        let mut model = Self::build(config, schema, vocab, 0, 0)?;
        model.store.load_values(values)?;
        model.refresh_fixed_vectors()?;
        Ok(model)
    }

    /// Recomputes the cached `[CLS]` vectors of slot names and candidate values.
    pub fn refresh_fixed_vectors(&mut self) -> Result<()> {
        let d = self.config.d_out;
        let mut slots = Matrix::zeros(self.schema.len(), d);
        let mut values = Vec::with_capacity(self.schema.len());
        for (j, slot) in self.schema.slots().iter().enumerate() {
            let v = self
                .fixed_encoder
                .encode_cls(&self.store, &self.vocab.encode_single(&slot.name))?;
            slots.row_mut(j).copy_from_slice(v.row(0));
            let mut cands = Matrix::zeros(slot.values.len(), d);
            for (i, value) in slot.values.iter().enumerate() {
                let v = self
                    .fixed_encoder
                    .encode_cls(&self.store, &self.vocab.encode_single(value))?;
                cands.row_mut(i).copy_from_slice(v.row(0));
            }
            values.push(cands);
        }
        let k = self.config.fixed_output_gain;
        slots.scale_assign(k);
        for v in &mut values {
            v.scale_assign(k);
        }
        self.slot_vectors = slots;
        self.value_vectors = values;
        Ok(())
    }

    fn value_vectors_distinct(&self) -> bool {
        self.value_vectors.iter().all(|m| {
            (0..m.rows()).all(|a| {
                (a + 1..m.rows()).all(|b| m.row(a).iter().zip(m.row(b)).any(|(x, y)| (x - y).abs() > 1e-9))
            })
        })
    }

    /// `h^{S_j}` for every slot (`J × d`).
    pub fn slot_vectors(&self) -> &Matrix {
        &self.slot_vectors
    }

    /// `h^v` for every candidate of slot `j`, in schema order.
    pub fn value_vectors(&self, j: usize) -> &Matrix {
        &self.value_vectors[j]
    }

    pub fn student_input(&self) -> &StudentInput {
        &self.student_input
    }

    pub fn prepare(&self, dialogue: &Dialogue) -> Result<PreparedDialogue> {
        if dialogue.turns.is_empty() {
            return Err(DsdnError::Argument(format!("dialogue `{}` has no turns", dialogue.id)));
        }
        let sop = derive_sop_labels(dialogue, &self.schema)?;
        let mut contexts = Vec::with_capacity(dialogue.len());
        let mut teacher_inputs = Vec::with_capacity(dialogue.len());
        let mut gold = Vec::with_capacity(dialogue.len());
        for (t, turn) in dialogue.turns.iter().enumerate() {
            contexts.push(
                self.vocab
                    .encode_pair(&turn.user, &turn.system, self.config.max_context_len),
            );
            teacher_inputs.push(build_teacher_input(
                &self.vocab,
                &self.schema,
                &dialogue.previous_state(t, &self.schema),
            )?);
            gold.push(self.schema.value_indices(&turn.state)?);
        }
        Ok(PreparedDialogue {
            id: dialogue.id.clone(),
            contexts,
            teacher_inputs,
            gold,
            sop,
        })
    }

    /// Encoder, attention, distillation, and decoder projections for every turn.
    ///
    /// `teacher_inputs` runs the teacher path on the given inputs (one per turn).
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        contexts: &[TokenSequence],
        teacher_inputs: Option<&[TeacherInput]>,
        distillation_on: bool,
    ) -> Result<ForwardOutput> {
        let slots = g.constant_ref(&self.slot_vectors);
        let student_slots = if distillation_on {
            Some(self.distillation.student_slot_states(g, &self.student_input)?)
        } else {
            None
        };
        let mut out = ForwardOutput::default();
        for (t, ctx) in contexts.iter().enumerate() {
            let context = self.context_encoder.forward(g, ctx)?;
            let r = turn_level_slot_attention(g, &self.turn_attention, slots, context, None);
            out.turn_features.push(r);
            let d = self.dialogue_attention.forward(g, slots, &out.turn_features)?;
            let f = fuse_features(g, r, d);
            let c = match student_slots {
                Some(h_stu) => {
                    let r_stu = self.distillation.student_forward(g, h_stu, context, None);
                    out.student.push(r_stu);
                    g.add(f, r_stu)
                }
                None => f,
            };
            if let Some(inputs) = teacher_inputs {
                out.teacher
                    .push(self.distillation.teacher_forward(g, &inputs[t], context, None)?);
            }
            out.dialogue_features.push(d);
            out.fused.push(f);
            out.integrated.push(c);
            out.value_repr.push(self.value_head.project_value(g, c));
        }
        Ok(out)
    }

    /// Training objective of `phase` for one dialogue, as a graph node plus its parts.
    pub fn loss<'a>(
        &'a self,
        g: &mut Graph<'a>,
        prep: &PreparedDialogue,
        phase: Phase,
        opts: &LossOptions,
    ) -> Result<(Var, LossParts)> {
        let use_teacher = phase == Phase::One && opts.distillation_on;
        if use_teacher {
            check_alpha(opts.alpha)?;
        }
        let out = self.forward(
            g,
            &prep.contexts,
            use_teacher.then_some(prep.teacher_inputs.as_slice()),
            opts.distillation_on,
        )?;
        let n_turns = prep.num_turns();
        let cells = (n_turns * self.schema.len()) as f64;
        let candidates: Vec<Var> = self.value_vectors.iter().map(|m| g.constant_ref(m)).collect();
        let mut nll = Vec::with_capacity(n_turns);
        for (t, &o) in out.value_repr.iter().enumerate() {
            nll.push((value_nll_graph(g, o, &candidates, &prep.gold[t]), 1.0 / cells));
        }
        let value = g.lin_comb(&nll);
        let mut parts = LossParts {
            value: g.value(value).item(),
            ..LossParts::default()
        };
        let mut terms = vec![(value, 1.0)];
        match phase {
            Phase::One if use_teacher => {
                let probs: Vec<Var> = out.teacher.iter().map(|o| o.sop).collect();
                let probs = g.concat_rows(&probs);
                let sop = g.bce_mean(probs, &prep.sop.turn_major());
                let tea: Vec<Var> = out.teacher.iter().map(|o| o.features).collect();
                let mut tea = g.concat_rows(&tea);
                if opts.stop_teacher_grad {
                    tea = g.detach(tea);
                }
                let stu = g.concat_rows(&out.student);
                let distill = g.mse_mean(tea, stu);
                parts.sop = g.value(sop).item();
                parts.distill = g.value(distill).item();
                terms.push((sop, opts.alpha));
                terms.push((distill, 1.0 - opts.alpha));
            }
            Phase::One => {}
            Phase::Two => {
                let c = g.concat_rows(&out.integrated);
                let aux = match opts.cl_mode {
                    ClMode::None => None,
                    ClMode::CrossEntropy => {
                        let p = self.aux_sop_head.forward(g, c);
                        Some(g.bce_mean(p, &prep.sop.turn_major()))
                    }
                    ClMode::Contrastive | ClMode::ContrastiveMinus => {
                        let variant = if opts.cl_mode == ClMode::Contrastive {
                            ClVariant::Full
                        } else {
                            ClVariant::WithoutDialogueNegatives
                        };
                        let z = self.projection.forward(g, c);
                        Some(nt_xent_graph(g, z, &prep.sop, opts.tau, variant)?)
                    }
                };
                if let Some(aux) = aux {
                    parts.aux = g.value(aux).item();
                    terms.push((aux, 1.0));
                }
            }
        }
        let total = g.lin_comb(&terms);
        parts.total = g.value(total).item();
        Ok((total, parts))
    }

    /// Loss parts of one dialogue without gradient tracking.
    pub fn evaluate_loss(&self, prep: &PreparedDialogue, phase: Phase, opts: &LossOptions) -> Result<LossParts> {
        let mut g = Graph::inference(&self.store);
        Ok(self.loss(&mut g, prep, phase, opts)?.1)
    }

    /// Student-path prediction of every turn's state. Turn `t` depends only on turns `≤ t`.
    pub fn predict(&self, dialogue: &Dialogue, distillation_on: bool) -> Result<Vec<TurnPrediction>> {
        Ok(self
            .predict_with_features(dialogue, distillation_on)?
            .into_iter()
            .map(|(p, _)| p)
            .collect())
    }

    /// Predictions together with the integrated feature matrix (`J × d`) of each turn.
    pub fn predict_with_features(
        &self,
        dialogue: &Dialogue,
        distillation_on: bool,
    ) -> Result<Vec<(TurnPrediction, Matrix)>> {
        let contexts: Vec<TokenSequence> = dialogue
            .turns
            .iter()
            .map(|t| self.vocab.encode_pair(&t.user, &t.system, self.config.max_context_len))
            .collect();
        let mut g = Graph::inference(&self.store);
        let out = self.forward(&mut g, &contexts, None, distillation_on)?;
        let mut preds = Vec::with_capacity(contexts.len());
        for (&o, &c) in out.value_repr.iter().zip(&out.integrated) {
            let o = g.value(o);
            let mut state = DialogueState::new();
            let mut indices = Vec::with_capacity(self.schema.len());
            for (j, slot) in self.schema.slots().iter().enumerate() {
                let probs = value_distribution(o.row(j), &self.value_vectors[j])?;
                let best = argmax(&probs);
                state.insert(slot.name.clone(), slot.values[best].clone());
                indices.push(best);
            }
            preds.push((
                TurnPrediction {
                    state,
                    value_indices: indices,
                    sop: None,
                },
                g.value(c).clone(),
            ));
        }
        Ok(preds)
    }

    /// Per-slot SOP probabilities of the teacher head for each turn, fed with
    /// the given previous states (one per turn).
    pub fn teacher_sop(&self, dialogue: &Dialogue, previous_states: &[DialogueState]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference(&self.store);
        let mut out = Vec::with_capacity(dialogue.len());
        for (turn, prev) in dialogue.turns.iter().zip(previous_states) {
            let ctx = self
                .vocab
                .encode_pair(&turn.user, &turn.system, self.config.max_context_len);
            let context = self.context_encoder.forward(&mut g, &ctx)?;
            let input = build_teacher_input(&self.vocab, &self.schema, prev)?;
            let tea = self.distillation.teacher_forward(&mut g, &input, context, None)?;
            out.push(g.value(tea.sop).data().to_vec());
        }
        Ok(out)
    }

    /// Predictions with SOP probabilities attached. With distillation on, the
    /// teacher head reads the model's own previous prediction; otherwise the
    /// SOP bit is whether the predicted value changed.
    pub fn predict_with_sop(&self, dialogue: &Dialogue, distillation_on: bool) -> Result<Vec<TurnPrediction>> {
        let mut preds = self.predict(dialogue, distillation_on)?;
        let mut prev_states = vec![self.schema.empty_state()];
        prev_states.extend(preds.iter().take(preds.len().saturating_sub(1)).map(|p| p.state.clone()));
        if distillation_on {
            let sop = self.teacher_sop(dialogue, &prev_states)?;
            for (p, s) in preds.iter_mut().zip(sop) {
                p.sop = Some(s);
            }
        } else {
            for (p, prev) in preds.iter_mut().zip(&prev_states) {
                let bits = self
                    .schema
                    .slots()
                    .iter()
                    .map(|s| if p.state[&s.name] != prev[&s.name] { 1.0 } else { 0.0 })
                    .collect();
                p.sop = Some(bits);
            }
        }
        Ok(preds)
    }

    /// Projected contrastive vectors `z` (`T·J × d₁`, turn-major) of one dialogue.
    pub fn project_dialogue(&self, dialogue: &Dialogue, distillation_on: bool) -> Result<Matrix> {
        let contexts: Vec<TokenSequence> = dialogue
            .turns
            .iter()
            .map(|t| self.vocab.encode_pair(&t.user, &t.system, self.config.max_context_len))
            .collect();
        let mut g = Graph::inference(&self.store);
        let out = self.forward(&mut g, &contexts, None, distillation_on)?;
        let c = g.concat_rows(&out.integrated);
        let z = self.projection.forward(&mut g, c);
        Ok(g.value(z).clone())
    }
}

fn check_distinct_candidates(schema: &Schema, vocab: &Vocab) -> Result<()> {
    for slot in schema.slots() {
        let toks: Vec<Vec<u32>> = slot.values.iter().map(|v| vocab.tokenize(v)).collect();
        for a in 0..toks.len() {
            for b in a + 1..toks.len() {
                if toks[a] == toks[b] {
                    return Err(DsdnError::Schema(format!(
                        "values `{}` and `{}` of slot `{}` tokenize identically",
                        slot.values[a], slot.values[b], slot.name
                    )));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, toy_schema};

    fn tiny() -> (DsdnModel, Vec<Dialogue>) {
        let schema = toy_schema();
        let dialogues = generate_synthetic_corpus(&schema, 3, 1, &[]).unwrap();
        let vocab = Vocab::build(&schema, &dialogues);
        let config = ModelConfig {
            d_out: 8,
            n_heads: 2,
            base_layers: 1,
            dialogue_layers: 1,
            ..ModelConfig::default()
        };
        (DsdnModel::new(config, schema, vocab, 5).unwrap(), dialogues)
    }

    #[test]
    fn untrained_predictions_are_total_states() {
        let (model, dialogues) = tiny();
        for d in &dialogues {
            let preds = model.predict_with_sop(d, true).unwrap();
            assert_eq!(preds.len(), d.len());
            for p in preds {
                model.schema.check_state(&p.state).unwrap();
                assert!(p.sop.unwrap().iter().all(|&x| x > 0.0 && x < 1.0));
            }
        }
    }

    #[test]
    fn none_vector_differs_from_other_values() {
        let (model, _) = tiny();
        for j in 0..model.schema.len() {
            let m = model.value_vectors(j);
            for i in 1..m.rows() {
                assert!(m.row(0) != m.row(i));
            }
        }
    }

    #[test]
    fn loss_parts_are_finite_in_both_phases() {
        let (model, dialogues) = tiny();
        let prep = model.prepare(&dialogues[0]).unwrap();
        for phase in [Phase::One, Phase::Two] {
            for cl_mode in ClMode::ALL {
                let opts = LossOptions {
                    cl_mode,
                    ..LossOptions::default()
                };
                let parts = model.evaluate_loss(&prep, phase, &opts).unwrap();
                assert!(parts.total.is_finite() && parts.value > 0.0);
            }
        }
    }

    #[test]
    fn cl_mode_parses() {
        for m in ClMode::ALL {
            assert_eq!(m.as_str().parse::<ClMode>().unwrap(), m);
        }
        assert!("bogus".parse::<ClMode>().is_err());
    }
}
