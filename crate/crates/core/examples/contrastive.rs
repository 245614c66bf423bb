//! Sample selection and the inter-slot contrastive loss on a hand-made
//! label matrix, with and without dialogue-level negatives.

use dsdn::contrastive::{anchors_with_positives, nt_xent_loss, ClVariant};
use dsdn::corpus::SopLabelMatrix;
use dsdn::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    // three slots, three turns; slots 0 and 1 update together at turn 2
    let labels = SopLabelMatrix::from_rows(vec![vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 1]]);
    for (anchor, sets) in anchors_with_positives(&labels) {
        println!(
            "anchor {:?}: positives {:?}, turn negatives {:?}, dialogue negatives {:?}",
            anchor, sets.positives, sets.negatives_turn, sets.negatives_dialogue
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rows: Vec<Vec<f64>> = (0..9).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut z = Matrix::from_rows(&rows);
    for tau in [0.01, 0.1, 1.0] {
        println!(
            "tau {tau:<5} full {:.4}  turn negatives only {:.4}",
            nt_xent_loss(&z, &labels, tau, ClVariant::Full)?,
            nt_xent_loss(&z, &labels, tau, ClVariant::WithoutDialogueNegatives)?
        );
    }

    // pull the co-updated pair together (rows are turn-major: t*J + j)
    let (a, b) = (3, 4);
    for k in 0..4 {
        let mean = 0.5 * (z.get(a, k) + z.get(b, k));
        z.set(a, k, mean);
        z.set(b, k, mean);
    }
    println!("after aligning the pair: {:.4}", nt_xent_loss(&z, &labels, 0.1, ClVariant::Full)?);
    Ok(())
}
