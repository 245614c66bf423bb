//! Two-phase training, early stopping, and ablation runs.
//!
//! Phase 1 minimizes the value loss plus the distillation objective and keeps
//! the checkpoint with the lowest dev loss. Phase 2 freezes the distillation
//! module, adds the configured auxiliary objective, runs a fixed number of
//! epochs, and keeps the checkpoint with the best dev joint goal accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::autograd::Graph;
use crate::corpus::{Dialogue, Schema};
use crate::error::{DsdnError, Result};
use crate::evaluation::states_match;
use crate::model::{ClMode, DsdnModel, LossOptions, ModelConfig, Phase, PreparedDialogue};
use crate::optim::{clip_global_norm, Adam, WarmupLinear};
use crate::params::{Gradients, Group, GroupSet};
use crate::tokenizer::Vocab;

/// Every training and architecture knob, as one flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub tau: f64,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
    pub warmup_proportion: f64,
    pub phase1_max_epochs: usize,
    pub phase1_patience: usize,
    pub phase2_epochs: usize,
    pub phase1_batch: usize,
    pub phase2_batch: usize,
    pub seed: u64,
    pub distillation_on: bool,
    pub cl_mode: ClMode,
    pub stop_teacher_grad: bool,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub dropout: f64,
    pub d_out: usize,
    pub n_heads: usize,
    pub base_layers: usize,
    pub dialogue_layers: usize,
    pub d_ff: Option<usize>,
    pub d1: Option<usize>,
    pub d2: Option<usize>,
    pub max_context_len: usize,
    pub max_turns: usize,
    pub fixed_output_gain: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            alpha: 0.8,
            tau: 0.01,
            phase1_lr: 1e-4,
            phase2_lr: 1e-5,
            warmup_proportion: 0.1,
            phase1_max_epochs: 100,
            phase1_patience: 15,
            phase2_epochs: 15,
            phase1_batch: 8,
            phase2_batch: 16,
            seed: 42,
            distillation_on: true,
            cl_mode: ClMode::Contrastive,
            stop_teacher_grad: false,
            grad_clip: 1.0,
            dropout: 0.0,
            d_out: m.d_out,
            n_heads: m.n_heads,
            base_layers: m.base_layers,
            dialogue_layers: m.dialogue_layers,
            d_ff: m.d_ff,
            d1: m.d1,
            d2: m.d2,
            max_context_len: m.max_context_len,
            max_turns: m.max_turns,
            fixed_output_gain: m.fixed_output_gain,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_out: self.d_out,
            n_heads: self.n_heads,
            base_layers: self.base_layers,
            dialogue_layers: self.dialogue_layers,
            d_ff: self.d_ff,
            d1: self.d1,
            d2: self.d2,
            max_context_len: self.max_context_len,
            max_turns: self.max_turns,
            fixed_output_gain: self.fixed_output_gain,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            distillation_on: self.distillation_on,
            cl_mode: self.cl_mode,
            alpha: self.alpha,
            tau: self.tau,
            stop_teacher_grad: self.stop_teacher_grad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(DsdnError::Config(format!("{field} {why}")));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", "must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", "must be positive");
        }
        if !(self.phase1_lr > 0.0) {
            return bad("phase1_lr", "must be positive");
        }
        if !(self.phase2_lr > 0.0) {
            return bad("phase2_lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_proportion) {
            return bad("warmup_proportion", "must lie in [0, 1)");
        }
        for (field, v) in [
            ("phase1_max_epochs", self.phase1_max_epochs),
            ("phase1_patience", self.phase1_patience),
            ("phase2_epochs", self.phase2_epochs),
            ("phase1_batch", self.phase1_batch),
            ("phase2_batch", self.phase2_batch),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        self.model_config().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| DsdnError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_joint_ga: f64,
}

#[derive(Clone, Debug)]
pub struct PhaseResult {
    /// The selected (best-dev) checkpoint.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Groups updated in `phase` under `opts`; everything else is frozen.
pub fn trainable_groups(phase: Phase, opts: &LossOptions) -> GroupSet {
    let mut set = phase.trainable();
    if phase == Phase::One && !opts.distillation_on {
        set = Group::DISTILLATION.into_iter().fold(set, |s, g| s.without(g));
    }
    if phase == Phase::Two {
        if !matches!(opts.cl_mode, ClMode::Contrastive | ClMode::ContrastiveMinus) {
            set = set.without(Group::ProjectionHead);
        }
        if opts.cl_mode != ClMode::CrossEntropy {
            set = set.without(Group::AuxSopHead);
        }
    }
    set
}

fn frozen_modules(trainable: GroupSet) -> Vec<String> {
    Group::ALL
        .into_iter()
        .filter(|g| !trainable.contains(*g))
        .map(|g| g.as_str().to_string())
        .collect()
}

fn prepare_all(model: &DsdnModel, dialogues: &[Dialogue], what: &str) -> Result<Vec<PreparedDialogue>> {
    if dialogues.is_empty() {
        return Err(DsdnError::Argument(format!("{what} corpus is empty")));
    }
    dialogues.iter().map(|d| model.prepare(d)).collect()
}

/// Mean total loss over `prepared`.
pub fn mean_loss(model: &DsdnModel, prepared: &[PreparedDialogue], phase: Phase, opts: &LossOptions) -> Result<f64> {
    let mut total = 0.0;
    for p in prepared {
        total += model.evaluate_loss(p, phase, opts)?.total;
    }
    Ok(total / prepared.len() as f64)
}

/// Fraction of turns of `dialogues` whose predicted state is fully correct.
pub fn joint_ga(model: &DsdnModel, dialogues: &[Dialogue], distillation_on: bool) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for d in dialogues {
        for (pred, turn) in model.predict(d, distillation_on)?.iter().zip(&d.turns) {
            total += 1;
            right += usize::from(states_match(&pred.state, &turn.state));
        }
    }
    Ok(if total == 0 { 0.0 } else { right as f64 / total as f64 })
}

struct EpochRunner<'c> {
    phase: Phase,
    opts: LossOptions,
    trainable: GroupSet,
    config: &'c TrainConfig,
    batch: usize,
    schedule: WarmupLinear,
    adam: Adam,
    rng: ChaCha8Rng,
}

impl EpochRunner<'_> {
    /// One pass over `train` in shuffled dialogue-granular batches; returns the mean loss.
    fn run(&mut self, model: &mut DsdnModel, train: &[PreparedDialogue]) -> Result<f64> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(self.batch) {
            let mut grads = Gradients::new(model.store.len());
            for &i in chunk {
                let mut g = Graph::new(&model.store, self.trainable);
                if self.config.dropout > 0.0 {
                    let seed = self.adam.steps() ^ ((i as u64) << 32) ^ self.config.seed;
                    g = g.with_dropout(self.config.dropout, seed);
                }
                let (loss, parts) = model.loss(&mut g, &train[i], self.phase, &self.opts)?;
                if !parts.total.is_finite() {
                    return Err(DsdnError::Numeric(format!(
                        "non-finite loss on dialogue `{}` in phase {}",
                        train[i].id,
                        self.phase.number()
                    )));
                }
                epoch_loss += parts.total;
                grads.add_all(&g.backward(loss));
            }
            grads.scale(1.0 / chunk.len() as f64);
            clip_global_norm(&mut grads, self.config.grad_clip);
            let lr = self.schedule.lr(self.adam.steps() + 1);
            self.adam.step(&mut model.store, &grads, lr, self.trainable);
        }
        Ok(epoch_loss / train.len() as f64)
    }
}

/// Phase 1 from a freshly initialized model. `on_epoch` sees every log record.
pub fn train_phase1(
    train: &[Dialogue],
    dev: &[Dialogue],
    schema: &Schema,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<PhaseResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(DsdnError::Argument("training corpus is empty".into()));
    }
    let vocab = Vocab::build(schema, train);
    let model = DsdnModel::new(config.model_config(), schema.clone(), vocab, config.seed)?;
    train_phase1_from(model, train, dev, config, on_epoch)
}

/// Phase 1 starting from the given (initialized) model.
pub fn train_phase1_from(
    mut model: DsdnModel,
    train: &[Dialogue],
    dev: &[Dialogue],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<PhaseResult> {
    config.validate()?;
    let train_p = prepare_all(&model, train, "training")?;
    let dev_p = prepare_all(&model, dev, "development")?;
    let opts = config.loss_options();
    let trainable = trainable_groups(Phase::One, &opts);
    let steps_per_epoch = train.len().div_ceil(config.phase1_batch) as u64;
    let mut runner = EpochRunner {
        phase: Phase::One,
        opts,
        trainable,
        config,
        batch: config.phase1_batch,
        schedule: WarmupLinear::new(
            config.phase1_lr,
            config.warmup_proportion,
            steps_per_epoch * config.phase1_max_epochs as u64,
        ),
        adam: Adam::new(model.store.len()),
        rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
    };
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut since_best = 0;
    for epoch in 1..=config.phase1_max_epochs {
        let train_loss = runner.run(&mut model, &train_p)?;
        let dev_loss = mean_loss(&model, &dev_p, Phase::One, &opts)?;
        let dev_joint_ga = joint_ga(&model, dev, opts.distillation_on)?;
        let record = EpochRecord {
            phase: 1,
            epoch,
            train_loss,
            dev_loss,
            dev_joint_ga,
        };
        log::info!("phase 1 epoch {epoch}: train {train_loss:.5} dev {dev_loss:.5} dev JGA {dev_joint_ga:.4}");
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|b| dev_loss < b.meta.dev_loss) {
            best = Some(Checkpoint {
                meta: CheckpointMeta {
                    phase: 1,
                    epoch,
                    dev_loss,
                    dev_joint_ga: Some(dev_joint_ga),
                    frozen_modules: frozen_modules(trainable),
                    train_config: config.clone(),
                },
                model: model.clone(),
            });
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.phase1_patience {
                log::info!("phase 1 early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok(PhaseResult {
        checkpoint: best.expect("at least one epoch ran"),
        history,
    })
}

/// Phase 2 from a phase-1 checkpoint.
pub fn train_phase2(
    checkpoint: &Checkpoint,
    train: &[Dialogue],
    dev: &[Dialogue],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<PhaseResult> {
    config.validate()?;
    if checkpoint.meta.phase != 1 {
        return Err(DsdnError::Checkpoint(format!(
            "phase 2 needs a phase-1 checkpoint, got phase {}",
            checkpoint.meta.phase
        )));
    }
    let mut model = checkpoint.model.clone();
    if model.store.ids_in(Group::DISTILLATION.into_iter().collect()).is_empty() {
        return Err(DsdnError::Checkpoint("checkpoint holds no distillation parameters".into()));
    }
    let train_p = prepare_all(&model, train, "training")?;
    let dev_p = prepare_all(&model, dev, "development")?;
    let opts = config.loss_options();
    let trainable = trainable_groups(Phase::Two, &opts);
    let steps_per_epoch = train.len().div_ceil(config.phase2_batch) as u64;
    let mut runner = EpochRunner {
        phase: Phase::Two,
        opts,
        trainable,
        config,
        batch: config.phase2_batch,
        schedule: WarmupLinear::new(
            config.phase2_lr,
            config.warmup_proportion,
            steps_per_epoch * config.phase2_epochs as u64,
        ),
        adam: Adam::new(model.store.len()),
        rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2)),
    };
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=config.phase2_epochs {
        let train_loss = runner.run(&mut model, &train_p)?;
        let dev_loss = mean_loss(&model, &dev_p, Phase::Two, &opts)?;
        let dev_joint_ga = joint_ga(&model, dev, opts.distillation_on)?;
        let record = EpochRecord {
            phase: 2,
            epoch,
            train_loss,
            dev_loss,
            dev_joint_ga,
        };
        log::info!("phase 2 epoch {epoch}: train {train_loss:.5} dev {dev_loss:.5} dev JGA {dev_joint_ga:.4}");
        on_epoch(&record);
        history.push(record);
        if best
            .as_ref()
            .is_none_or(|b| dev_joint_ga > b.meta.dev_joint_ga.unwrap_or(f64::NEG_INFINITY))
        {
            best = Some(Checkpoint {
                meta: CheckpointMeta {
                    phase: 2,
                    epoch,
                    dev_loss,
                    dev_joint_ga: Some(dev_joint_ga),
                    frozen_modules: frozen_modules(trainable),
                    train_config: config.clone(),
                },
                model: model.clone(),
            });
        }
    }
    Ok(PhaseResult {
        checkpoint: best.expect("phase2_epochs is positive"),
        history,
    })
}

/// Phase 1 followed by phase 2.
pub fn train(
    train: &[Dialogue],
    dev: &[Dialogue],
    schema: &Schema,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(PhaseResult, PhaseResult)> {
    let p1 = train_phase1(train, dev, schema, config, on_epoch)?;
    let p2 = train_phase2(&p1.checkpoint, train, dev, config, on_epoch)?;
    Ok((p1, p2))
}

/// One model variant of an ablation study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub distillation_on: bool,
    pub cl_mode: ClMode,
    /// Published joint-GA change against the full model on MultiWOZ 2.0, in points.
    pub reference_delta: Option<f64>,
}

impl AblationVariant {
    fn new(name: &str, distillation_on: bool, cl_mode: ClMode, reference_delta: Option<f64>) -> Self {
        Self {
            name: name.into(),
            distillation_on,
            cl_mode,
            reference_delta,
        }
    }
}

/// Full model, each module removed, and both removed.
pub fn module_ablation_variants() -> Vec<AblationVariant> {
    vec![
        AblationVariant::new("full", true, ClMode::Contrastive, Some(0.0)),
        AblationVariant::new("no_distillation", false, ClMode::Contrastive, Some(-1.77)),
        AblationVariant::new("no_contrastive", true, ClMode::None, Some(-1.05)),
        AblationVariant::new("neither", false, ClMode::None, Some(-3.37)),
    ]
}

/// The module grid plus the alternative SOP objectives on top of the no-distillation baseline.
pub fn sop_objective_variants() -> Vec<AblationVariant> {
    let mut v = module_ablation_variants();
    v.push(AblationVariant::new("baseline_cross_entropy", false, ClMode::CrossEntropy, Some(-2.85)));
    v.push(AblationVariant::new(
        "baseline_contrastive_minus",
        false,
        ClMode::ContrastiveMinus,
        Some(-2.15),
    ));
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    /// Dev joint GA of the selected phase-2 checkpoint, per seed.
    pub dev_joint_ga: Vec<f64>,
    pub mean_dev_joint_ga: f64,
    /// Mean joint-GA change against the first variant, in points.
    pub delta_points: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }

    /// `variant,distillation_on,cl_mode,mean_dev_joint_ga,delta_points,reference_delta` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,distillation_on,cl_mode,mean_dev_joint_ga,delta_points,reference_delta\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.4},{}\n",
                r.variant.name,
                r.variant.distillation_on,
                r.variant.cl_mode,
                r.mean_dev_joint_ga,
                r.delta_points,
                r.variant.reference_delta.map(|d| d.to_string()).unwrap_or_default()
            ));
        }
        out
    }
}

/// Trains every variant under every seed. Variants sharing the distillation
/// switch share their phase-1 run, since phase 1 ignores the auxiliary objective.
pub fn run_ablation(
    train: &[Dialogue],
    dev: &[Dialogue],
    schema: &Schema,
    base: &TrainConfig,
    variants: &[AblationVariant],
    seeds: &[u64],
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(DsdnError::Argument("ablation needs at least one variant and one seed".into()));
    }
    let mut scores = vec![Vec::with_capacity(seeds.len()); variants.len()];
    for &seed in seeds {
        let mut phase1: [Option<Checkpoint>; 2] = [None, None];
        for (v, variant) in variants.iter().enumerate() {
            let config = TrainConfig {
                seed,
                distillation_on: variant.distillation_on,
                cl_mode: variant.cl_mode,
                ..base.clone()
            };
            let slot = &mut phase1[usize::from(variant.distillation_on)];
            if slot.is_none() {
                log::info!("ablation seed {seed}: phase 1 with distillation_on={}", variant.distillation_on);
                *slot = Some(train_phase1(train, dev, schema, &config, &mut |_| {})?.checkpoint);
            }
            let p1 = slot.as_ref().expect("filled above");
            log::info!("ablation seed {seed}: phase 2 for `{}`", variant.name);
            let p2 = train_phase2(p1, train, dev, &config, &mut |_| {})?;
            scores[v].push(p2.checkpoint.meta.dev_joint_ga.unwrap_or(0.0));
        }
    }
    let means: Vec<f64> = scores
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect();
    let rows = variants
        .iter()
        .zip(scores)
        .zip(&means)
        .map(|((variant, dev_joint_ga), &mean)| AblationRow {
            variant: variant.clone(),
            dev_joint_ga,
            mean_dev_joint_ga: mean,
            delta_points: 100.0 * (mean - means[0]),
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
    })
}
