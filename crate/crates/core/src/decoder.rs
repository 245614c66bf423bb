//! Value decoding: a layer-normalized projection of each slot feature scored
//! against the slot's candidate value vectors by negative Euclidean distance.

use crate::autograd::{log_sum_exp, Graph, Var};
use crate::error::{DsdnError, Result};
use crate::nn::{LayerNorm, Linear, ParamBuilder};
use crate::params::Group;
use crate::tensor::Matrix;

/// `o = LayerNorm(W⁵ c)`; `W⁵ ∈ R^{d×d}`, no bias.
#[derive(Clone, Debug)]
pub struct ValueHead {
    pub w5: Linear,
    pub norm: LayerNorm,
}

impl ValueHead {
    pub fn new(b: &mut ParamBuilder, d_model: usize) -> Self {
        Self {
            w5: Linear::new(b, "value_head.w5", Group::ValueHead, d_model, d_model, false),
            norm: LayerNorm::new(b, "value_head.norm", Group::ValueHead, d_model),
        }
    }

    pub fn project_value(&self, g: &mut Graph, c: Var) -> Var {
        let h = self.w5.forward(g, c);
        self.norm.forward(g, h)
    }
}

/// `softmax(−‖o − h^v‖₂)` over the rows of `candidates`.
pub fn value_distribution(o: &[f64], candidates: &Matrix) -> Result<Vec<f64>> {
    if candidates.rows() == 0 {
        return Err(DsdnError::Schema("slot has an empty candidate value set".into()));
    }
    if candidates.cols() != o.len() {
        return Err(DsdnError::Argument(format!(
            "value vector width {} differs from candidate width {}",
            o.len(),
            candidates.cols()
        )));
    }
    let logits: Vec<f64> = (0..candidates.rows())
        .map(|i| {
            -o.iter()
                .zip(candidates.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let lse = log_sum_exp(&logits);
    Ok(logits.iter().map(|l| (l - lse).exp()).collect())
}

/// Index of the most probable candidate; ties go to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Mean negative log-likelihood of the gold candidates. `distributions[c]`
/// and `gold[c]` describe one `(slot, turn)` cell.
pub fn value_loss(distributions: &[Vec<f64>], gold: &[usize]) -> Result<f64> {
    if distributions.len() != gold.len() || gold.is_empty() {
        return Err(DsdnError::Argument(format!(
            "{} distributions for {} gold values",
            distributions.len(),
            gold.len()
        )));
    }
    let mut total = 0.0;
    for (dist, &g) in distributions.iter().zip(gold) {
        let p = dist
            .get(g)
            .ok_or_else(|| DsdnError::Schema(format!("gold value index {g} outside candidate set of {}", dist.len())))?;
        total -= p.ln();
    }
    Ok(total / gold.len() as f64)
}

/// Summed NLL (not yet averaged) of the gold candidate for each row of `o`
/// (`J × d`), where row `j` is scored against `candidates[j]`.
pub fn value_nll_graph(g: &mut Graph, o: Var, candidates: &[Var], gold: &[usize]) -> Var {
    let mut terms = Vec::with_capacity(gold.len());
    for (j, (&cand, &target)) in candidates.iter().zip(gold).enumerate() {
        let oj = g.gather_rows(o, &[j]);
        let dist = g.l2_distances(oj, cand);
        let logits = g.scale(dist, -1.0);
        terms.push((g.nll_rows(logits, &[target]), 1.0));
    }
    g.lin_comb(&terms)
}
