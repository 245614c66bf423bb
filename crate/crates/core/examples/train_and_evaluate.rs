//! Train both phases on a synthetic corpus, save and reload the final
//! checkpoint, then write predictions and score them.

use dsdn::checkpoint::Checkpoint;
use dsdn::cli::predict_records;
use dsdn::corpus::{generate_synthetic_corpus, toy_schema};
use dsdn::evaluation::{evaluate, save_predictions};
use dsdn::trainer::{train, TrainConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let schema = toy_schema();
    let pairs = vec![("hotel-book day".to_string(), "hotel-book stay".to_string())];
    let train_set = generate_synthetic_corpus(&schema, 60, 1, &pairs)?;
    let dev_set = generate_synthetic_corpus(&schema, 20, 2, &pairs)?;
    let config = TrainConfig {
        d_out: 32,
        n_heads: 4,
        base_layers: 2,
        dialogue_layers: 2,
        phase1_lr: 2e-3,
        phase2_lr: 2e-4,
        phase1_max_epochs: 25,
        phase2_epochs: 5,
        phase1_batch: 2,
        phase2_batch: 2,
        ..TrainConfig::default()
    };
    let (p1, p2) = train(&train_set, &dev_set, &schema, &config, &mut |_| {})?;
    println!(
        "phase 1 kept epoch {} (dev loss {:.4}); phase 2 kept epoch {}",
        p1.checkpoint.meta.epoch, p1.checkpoint.meta.dev_loss, p2.checkpoint.meta.epoch
    );

    let dir = std::env::temp_dir().join("dsdn-train-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("phase2.ckpt");
    p2.checkpoint.save(&path)?;
    let model = Checkpoint::load(&path)?.model;

    let records = predict_records(&model, &dev_set, config.distillation_on)?;
    save_predictions(&records, &dir.join("predictions.jsonl"))?;
    let report = evaluate(&records, &dev_set, &schema)?;
    println!("dev joint goal accuracy {:.4} over {} turns", report.joint_ga, report.n_turns);
    for (turn, acc) in &report.per_turn_joint_ga {
        println!("  turn {turn}: {acc:.3} ({} turns)", report.counts[turn]);
    }
    let seen = evaluate(&predict_records(&model, &train_set, config.distillation_on)?, &train_set, &schema)?;
    println!("training joint goal accuracy {:.4}", seen.joint_ga);
    println!("artifacts in {}", dir.display());
    Ok(())
}
