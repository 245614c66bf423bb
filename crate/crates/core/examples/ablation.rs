//! A reduced module ablation: the full model against variants without
//! distillation or without the contrastive objective, under shared seeds.

use dsdn::corpus::{generate_synthetic_corpus, toy_schema};
use dsdn::trainer::{module_ablation_variants, run_ablation, TrainConfig};

fn main() -> anyhow::Result<()> {
    let schema = toy_schema();
    let pairs = vec![("hotel-book day".to_string(), "hotel-book stay".to_string())];
    let train = generate_synthetic_corpus(&schema, 30, 11, &pairs)?;
    let dev = generate_synthetic_corpus(&schema, 15, 12, &pairs)?;
    let base = TrainConfig {
        d_out: 16,
        n_heads: 2,
        base_layers: 1,
        dialogue_layers: 1,
        phase1_lr: 2e-3,
        phase2_lr: 2e-4,
        phase1_max_epochs: 8,
        phase2_epochs: 2,
        phase1_batch: 2,
        phase2_batch: 2,
        ..TrainConfig::default()
    };
    let report = run_ablation(&train, &dev, &schema, &base, &module_ablation_variants(), &[1, 2])?;
    print!("{}", report.to_csv());
    Ok(())
}
