//! Multi-level slot attention: turn-level attention of each slot over the
//! current context, a transformer over the slot's turn-level features so far,
//! dialogue-level attention over that transformer's output, and max-pool fusion.
//!
//! Slots are processed together as the rows of one matrix. The dialogue-level
//! transformer packs the `J` per-slot sequences into one block-diagonal
//! attention problem, so slots never see each other here.

use crate::autograd::{Graph, Var};
use crate::error::{DsdnError, Result};
use crate::nn::{AttnMask, MultiHeadAttention, ParamBuilder, TransformerEncoder};
use crate::params::{Group, ParamId};

/// `r_t = MultiHead(h_S, R_t, R_t)` for all slots at once (`J × d` in, `J × d` out).
pub fn turn_level_slot_attention(
    g: &mut Graph,
    attention: &MultiHeadAttention,
    slot_vectors: Var,
    context: Var,
    context_mask: Option<&AttnMask>,
) -> Var {
    attention.forward(g, slot_vectors, context, context, context_mask)
}

/// Transformer over the per-slot turn sequence `r_1..r_t` followed by
/// slot-query attention over its output.
#[derive(Clone, Debug)]
pub struct DialogueLevelAttention {
    pub transformer: TransformerEncoder,
    pub turn_positions: ParamId,
    pub attention: MultiHeadAttention,
    pub max_turns: usize,
}

impl DialogueLevelAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        max_turns: usize,
    ) -> Result<Self> {
        if max_turns == 0 {
            return Err(DsdnError::Config("max_turns must be positive".into()));
        }
        Ok(Self {
            transformer: TransformerEncoder::new(
                b,
                "dialogue_transformer",
                Group::DialogueTransformer,
                n_layers,
                d_model,
                n_heads,
                d_ff,
            )?,
            turn_positions: b.normal(
                "dialogue_transformer.turn_position",
                Group::DialogueTransformer,
                max_turns,
                d_model,
                0.1,
            ),
            attention: MultiHeadAttention::new(b, "dialogue_attention", Group::DialogueAttention, d_model, n_heads)?,
            max_turns,
        })
    }

    /// `D_t^N` for every slot, packed slot-major: row `j * t + i` is turn `i` of slot `j`.
    pub fn contextualize(&self, g: &mut Graph, turn_features: &[Var]) -> Result<Var> {
        let t = turn_features.len();
        if t == 0 {
            return Err(DsdnError::Argument("dialogue-level attention needs at least one turn".into()));
        }
        let n_slots = g.shape(turn_features[0]).0;
        // turn-major rows i * J + j → slot-major rows j * t + i
        let stacked = g.concat_rows(turn_features);
        let order: Vec<usize> = (0..n_slots)
            .flat_map(|j| (0..t).map(move |i| i * n_slots + j))
            .collect();
        let packed = g.gather_rows(stacked, &order);
        let pos_idx: Vec<usize> = (0..n_slots)
            .flat_map(|_| (0..t).map(|i| i.min(self.max_turns - 1)))
            .collect();
        let table = g.param(self.turn_positions);
        let pos = g.gather_rows(table, &pos_idx);
        let x = g.add(packed, pos);
        let mask = (n_slots > 1).then(|| AttnMask::block_diagonal(n_slots, t));
        Ok(self.transformer.forward(g, x, mask.as_ref()))
    }

    /// `d_t = MultiHead(h_S, D_t^N, D_t^N)` for every slot (`J × d`).
    ///
    /// `turn_features[i]` holds all slots' turn-level features for turn `i`;
    /// the result depends only on the turns passed in.
    pub fn forward(&self, g: &mut Graph, slot_vectors: Var, turn_features: &[Var]) -> Result<Var> {
        let contextual = self.contextualize(g, turn_features)?;
        let n_slots = g.shape(slot_vectors).0;
        if n_slots != g.shape(turn_features[0]).0 {
            return Err(DsdnError::Argument("slot count differs between queries and turn features".into()));
        }
        let t = turn_features.len();
        let mask = (n_slots > 1).then(|| AttnMask::query_per_block(n_slots, t));
        Ok(self
            .attention
            .forward(g, slot_vectors, contextual, contextual, mask.as_ref()))
    }
}

/// Elementwise maximum of turn-level and dialogue-level features. Ties route
/// the gradient to the turn-level branch.
pub fn fuse_features(g: &mut Graph, turn_level: Var, dialogue_level: Var) -> Var {
    g.maximum(turn_level, dialogue_level)
}

/// Plain-vector form of [`fuse_features`].
pub fn fuse(r: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    if r.len() != d.len() {
        return Err(DsdnError::Argument(format!(
            "cannot fuse vectors of length {} and {}",
            r.len(),
            d.len()
        )));
    }
    Ok(r.iter().zip(d).map(|(a, b)| a.max(*b)).collect())
}
