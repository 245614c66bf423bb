//! Generate a small synthetic corpus with one co-updating slot pair and
//! print its manifest and the update labels of the first dialogue.

use dsdn::corpus::{derive_sop_labels, generate_synthetic_corpus, toy_schema, CorpusManifest};

fn main() -> anyhow::Result<()> {
    let schema = toy_schema();
    let pairs = vec![("hotel-book day".to_string(), "hotel-book stay".to_string())];
    let corpus = generate_synthetic_corpus(&schema, 50, 7, &pairs)?;
    let manifest = CorpusManifest::measure(&corpus, &schema, 7, &pairs)?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);

    let first = &corpus[0];
    println!("\ndialogue {} ({} turns)", first.id, first.len());
    for (t, turn) in first.turns.iter().enumerate() {
        println!("  turn {}: user: {}", t + 1, turn.user);
    }
    let labels = derive_sop_labels(first, &schema)?;
    for (slot, row) in schema.slots().iter().zip(labels.rows()) {
        println!("  {:<18} {:?}", slot.name, row);
    }
    Ok(())
}
