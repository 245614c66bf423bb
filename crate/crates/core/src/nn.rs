//! Differentiable building blocks: linear maps, layer normalization,
//! multi-head scaled dot-product attention, post-LN transformer encoder
//! layers, and the token-sequence base encoder.
//!
//! All layers are plain handles into a [`ParamStore`]; the forward pass is
//! recorded on a [`Graph`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{DsdnError, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::tokenizer::TokenSequence;

/// Registers freshly initialized parameters under a name prefix.
pub struct ParamBuilder<'s> {
    store: &'s mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'s> ParamBuilder<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn xavier(&mut self, name: &str, group: Group, rows: usize, cols: usize) -> ParamId {
        let m = Matrix::xavier(rows, cols, &mut self.rng);
        self.store.add(name, group, m)
    }

    pub fn normal(&mut self, name: &str, group: Group, rows: usize, cols: usize, std: f64) -> ParamId {
        let m = Matrix::randn(rows, cols, std, &mut self.rng);
        self.store.add(name, group, m)
    }

    pub fn filled(&mut self, name: &str, group: Group, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store.add(name, group, Matrix::filled(rows, cols, v))
    }
}

/// `y = x Wᵀ + b` with `W` stored as `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, group: Group, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = b.xavier(&format!("{name}.weight"), group, d_out, d_in);
        let bias = bias.then(|| b.filled(&format!("{name}.bias"), group, 1, d_out, 0.0));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul_bt(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, group: Group, d: usize) -> Self {
        Self {
            gain: b.filled(&format!("{name}.gain"), group, 1, d, 1.0),
            bias: b.filled(&format!("{name}.bias"), group, 1, d, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Which key positions each query may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// One validity bit per key, shared by all queries.
    Keys(Vec<bool>),
    /// Row-major `queries × keys` validity bits.
    Full { rows: usize, cols: usize, valid: Vec<bool> },
}

impl AttnMask {
    fn expand(&self, rows: usize, cols: usize) -> Vec<bool> {
        match self {
            AttnMask::Keys(keys) => {
                assert_eq!(keys.len(), cols, "key mask length mismatch");
                (0..rows).flat_map(|_| keys.iter().copied()).collect()
            }
            AttnMask::Full { rows: r, cols: c, valid } => {
                assert_eq!((*r, *c), (rows, cols), "attention mask shape mismatch");
                valid.clone()
            }
        }
    }

    /// Block-diagonal mask for `n_seq` independent sequences of `len` rows each,
    /// packed contiguously.
    pub fn block_diagonal(n_seq: usize, len: usize) -> Self {
        let n = n_seq * len;
        let valid = (0..n * n).map(|i| (i / n) / len == (i % n) / len).collect();
        AttnMask::Full { rows: n, cols: n, valid }
    }

    /// Query `q` sees only rows of sequence `q` in a packed `n_seq × len` key matrix.
    pub fn query_per_block(n_seq: usize, len: usize) -> Self {
        let cols = n_seq * len;
        let valid = (0..n_seq * cols).map(|i| (i % cols) / len == i / cols).collect();
        AttnMask::Full { rows: n_seq, cols, valid }
    }
}

/// Scaled dot-product attention over `n_heads` heads with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut ParamBuilder, name: &str, group: Group, d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(DsdnError::Config(format!(
                "model width {d_model} is not divisible by {n_heads} attention heads"
            )));
        }
        Ok(Self {
            query: Linear::new(b, &format!("{name}.query"), group, d_model, d_model, true),
            key: Linear::new(b, &format!("{name}.key"), group, d_model, d_model, true),
            value: Linear::new(b, &format!("{name}.value"), group, d_model, d_model, true),
            output: Linear::new(b, &format!("{name}.output"), group, d_model, d_model, true),
            n_heads,
            d_model,
        })
    }

    pub fn forward(&self, g: &mut Graph, query: Var, keys: Var, values: Var, mask: Option<&AttnMask>) -> Var {
        self.forward_with_weights(g, query, keys, values, mask).0
    }

    /// Also returns the per-head attention weight matrices (`queries × keys`).
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        query: Var,
        keys: Var,
        values: Var,
        mask: Option<&AttnMask>,
    ) -> (Var, Vec<Var>) {
        let (m, n) = (g.shape(query).0, g.shape(keys).0);
        assert_eq!(n, g.shape(values).0, "keys and values differ in length");
        let mask = mask.map(|mk| mk.expand(m, n));
        let q = self.query.forward(g, query);
        let k = self.key.forward(g, keys);
        let v = self.value.forward(g, values);
        let dk = self.d_model / self.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dk, dk),
                    g.slice_cols(k, h * dk, dk),
                    g.slice_cols(v, h * dk, dk),
                )
            };
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let w = g.softmax_rows(scores, mask.as_deref());
            heads.push(g.matmul(w, vh));
            weights.push(w);
        }
        let concat = g.concat_cols(&heads);
        (self.output.forward(g, concat), weights)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(b: &mut ParamBuilder, name: &str, group: Group, d_model: usize, d_ff: usize) -> Self {
        Self {
            inner: Linear::new(b, &format!("{name}.inner"), group, d_model, d_ff, true),
            outer: Linear::new(b, &format!("{name}.outer"), group, d_ff, d_model, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.inner.forward(g, x);
        let h = g.relu(h);
        self.outer.forward(g, h)
    }
}

/// Post-LN encoder layer: `LN(x + MHA(x)) → LN(· + FFN(·))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl TransformerLayer {
    pub fn new(b: &mut ParamBuilder, name: &str, group: Group, d_model: usize, n_heads: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(b, &format!("{name}.attention"), group, d_model, n_heads)?,
            attention_norm: LayerNorm::new(b, &format!("{name}.attention_norm"), group, d_model),
            ffn: FeedForward::new(b, &format!("{name}.ffn"), group, d_model, d_ff),
            ffn_norm: LayerNorm::new(b, &format!("{name}.ffn_norm"), group, d_model),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&AttnMask>) -> Var {
        let a = self.attention.forward(g, x, x, x, mask);
        let a = g.dropout(a);
        let x = g.add(x, a);
        let x = self.attention_norm.forward(g, x);
        let f = self.ffn.forward(g, x);
        let f = g.dropout(f);
        let x = g.add(x, f);
        self.ffn_norm.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<TransformerLayer>,
}

impl TransformerEncoder {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        group: Group,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
    ) -> Result<Self> {
        if n_layers < 1 {
            return Err(DsdnError::Config(format!("{name}: at least one encoder layer is required")));
        }
        let layers = (0..n_layers)
            .map(|i| TransformerLayer::new(b, &format!("{name}.layer{i}"), group, d_model, n_heads, d_ff))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Output of the last layer; same number of rows as `x`.
    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&AttnMask>) -> Var {
        self.layers.iter().fold(x, |h, layer| layer.forward(g, h, mask))
    }
}

/// Shape hyperparameters shared by the base encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
}

/// Token + learned absolute position embeddings, embedding layer norm, and a
/// transformer stack. Stands in for a pretrained text encoder.
#[derive(Clone, Debug)]
pub struct BaseEncoder {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub embedding_norm: LayerNorm,
    pub encoder: TransformerEncoder,
    pub dims: EncoderDims,
}

impl BaseEncoder {
    pub fn new(b: &mut ParamBuilder, name: &str, group: Group, dims: EncoderDims) -> Result<Self> {
        Ok(Self {
            token_embedding: b.normal(&format!("{name}.token_embedding"), group, dims.vocab_size, dims.d_model, 1.0),
            position_embedding: b.normal(&format!("{name}.position_embedding"), group, dims.max_len, dims.d_model, 1.0),
            embedding_norm: LayerNorm::new(b, &format!("{name}.embedding_norm"), group, dims.d_model),
            encoder: TransformerEncoder::new(
                b,
                &format!("{name}.encoder"),
                group,
                dims.n_layers,
                dims.d_model,
                dims.n_heads,
                dims.d_ff,
            )?,
            dims,
        })
    }

    /// Hidden state of every position (`len × d_model`). Padded positions are
    /// excluded as attention keys.
    pub fn forward(&self, g: &mut Graph, seq: &TokenSequence) -> Result<Var> {
        if seq.is_empty() {
            return Err(DsdnError::Argument("cannot encode an empty token sequence".into()));
        }
        if seq.len() > self.dims.max_len {
            return Err(DsdnError::Argument(format!(
                "sequence of {} tokens exceeds encoder capacity {}",
                seq.len(),
                self.dims.max_len
            )));
        }
        if seq.mask.len() != seq.len() {
            return Err(DsdnError::Argument("token mask length differs from token count".into()));
        }
        if let Some(bad) = seq.ids.iter().find(|&&id| id as usize >= self.dims.vocab_size) {
            return Err(DsdnError::Argument(format!(
                "token id {bad} outside vocabulary of {}",
                self.dims.vocab_size
            )));
        }
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..seq.len()).collect();
        let tok_table = g.param(self.token_embedding);
        let pos_table = g.param(self.position_embedding);
        let tok = g.gather_rows(tok_table, &ids);
        let pos = g.gather_rows(pos_table, &positions);
        let x = g.add(tok, pos);
        let x = self.embedding_norm.forward(g, x);
        let x = g.dropout(x);
        let mask = (!seq.mask.iter().all(|m| *m)).then(|| AttnMask::Keys(seq.mask.clone()));
        Ok(self.encoder.forward(g, x, mask.as_ref()))
    }

    /// Hidden state at position 0 (the `[CLS]` token) as a `1 × d_model` matrix,
    /// computed without gradient tracking.
    pub fn encode_cls(&self, store: &ParamStore, seq: &TokenSequence) -> Result<Matrix> {
        let mut g = Graph::inference(store);
        let h = self.forward(&mut g, seq)?;
        let cls = g.gather_rows(h, &[0]);
        Ok(g.value(cls).clone())
    }
}
