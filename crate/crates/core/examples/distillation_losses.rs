//! Build teacher and student inputs for a dialogue and compute the
//! state-operation and distillation losses of an untrained model.

use dsdn::corpus::{generate_synthetic_corpus, toy_schema};
use dsdn::distillation::{build_teacher_input, dsd_loss};
use dsdn::model::{ClMode, DsdnModel, LossOptions, ModelConfig, Phase};
use dsdn::tokenizer::Vocab;

fn main() -> anyhow::Result<()> {
    let schema = toy_schema();
    let corpus = generate_synthetic_corpus(&schema, 4, 2, &[])?;
    let vocab = Vocab::build(&schema, &corpus);
    let config = ModelConfig {
        d_out: 16,
        n_heads: 2,
        base_layers: 1,
        dialogue_layers: 1,
        ..ModelConfig::default()
    };
    let model = DsdnModel::new(config, schema.clone(), vocab, 5)?;
    let dialogue = &corpus[0];

    let prev = &dialogue.turns[0].state;
    let teacher = build_teacher_input(&model.vocab, &schema, prev)?;
    println!("teacher input at turn 2: {}", model.vocab.detokenize(&teacher.tokens.ids));
    println!("student input (every turn): {}", model.vocab.detokenize(&model.student_input().tokens.ids));

    let opts = LossOptions {
        cl_mode: ClMode::None,
        alpha: 0.8,
        ..LossOptions::default()
    };
    let parts = model.evaluate_loss(&model.prepare(dialogue)?, Phase::One, &opts)?;
    println!("value {:.4}  sop {:.4}  distill {:.4}", parts.value, parts.sop, parts.distill);
    println!("combined distillation objective: {:.4}", dsd_loss(parts.sop, parts.distill, opts.alpha)?);
    Ok(())
}
