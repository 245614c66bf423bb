//! Run an untrained model over one dialogue and inspect the intermediate
//! slot features: turn-level, dialogue-level, their element-wise max, the
//! student's distilled features and the decoded value distribution.

use dsdn::autograd::Graph;
use dsdn::corpus::{generate_synthetic_corpus, toy_schema};
use dsdn::decoder::value_distribution;
use dsdn::model::{DsdnModel, ModelConfig};
use dsdn::tokenizer::Vocab;

fn main() -> anyhow::Result<()> {
    let schema = toy_schema();
    let corpus = generate_synthetic_corpus(&schema, 4, 1, &[])?;
    let vocab = Vocab::build(&schema, &corpus);
    let config = ModelConfig {
        d_out: 16,
        n_heads: 2,
        base_layers: 1,
        dialogue_layers: 1,
        ..ModelConfig::default()
    };
    let model = DsdnModel::new(config, schema.clone(), vocab, 3)?;
    let dialogue = &corpus[0];
    let prep = model.prepare(dialogue)?;

    let mut g = Graph::inference(&model.store);
    let out = model.forward(&mut g, &prep.contexts, None, true)?;
    for t in 0..prep.num_turns() {
        let (r, d, f) = (g.value(out.turn_features[t]), g.value(out.dialogue_features[t]), g.value(out.fused[t]));
        println!("turn {}: features {:?}", t + 1, f.shape());
        let j = 0;
        println!(
            "  {}: turn {:+.3} dialogue {:+.3} fused {:+.3} (first coordinate)",
            schema.slot(j).name,
            r.get(j, 0),
            d.get(j, 0),
            f.get(j, 0)
        );
        let o = g.value(out.value_repr[t]);
        let probs = value_distribution(o.row(j), model.value_vectors(j))?;
        let best = dsdn::decoder::argmax(&probs);
        println!("  decoded {} with p={:.3}", schema.slot(j).values[best], probs[best]);
    }
    println!("student features per turn: {:?}", g.value(out.student[0]).shape());
    Ok(())
}
