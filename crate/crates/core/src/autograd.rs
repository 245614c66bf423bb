//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! leaves borrowed from a [`ParamStore`]; only leaves whose [`Group`] is in the
//! graph's trainable set propagate gradients, so frozen components (the fixed
//! encoder, or the distillation module during phase 2) are constants by
//! construction.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{Gradients, GroupSet, ParamId, ParamStore};
use crate::tensor::{dot, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One anchor of a supervised contrastive objective over a similarity matrix.
///
/// `denominators` must contain every index in `positives`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveAnchor {
    pub row: usize,
    pub positives: Vec<usize>,
    pub denominators: Vec<usize>,
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gather { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Maximum(Var, Var),
    RowNormalize { x: Var, norms: Vec<f64> },
    L2Dist { query: Var, candidates: Var },
    NllRows { x: Var, targets: Vec<usize> },
    BceMean { p: Var, labels: Vec<f64> },
    MseMean(Var, Var),
    Contrastive { sim: Var, anchors: Vec<ContrastiveAnchor>, scale: f64 },
    LinComb(Vec<(Var, f64)>),
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

struct DropoutState {
    rng: ChaCha8Rng,
    p: f64,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    trainable: GroupSet,
    nodes: Vec<Node<'a>>,
    param_vars: Vec<Option<Var>>,
    dropout: Option<DropoutState>,
}

/// Clamp bounds applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, trainable: GroupSet) -> Self {
        Self {
            store,
            trainable,
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; store.len()],
            dropout: None,
        }
    }

    /// A graph in which no parameter requires gradients.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, GroupSet::empty())
    }

    /// Enables inverted dropout with drop probability `p` on [`Graph::dropout`] calls.
    pub fn with_dropout(mut self, p: f64, seed: u64) -> Self {
        if p > 0.0 {
            self.dropout = Some(DropoutState {
                rng: ChaCha8Rng::seed_from_u64(seed),
                p,
            });
        }
        self
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let needs = self.trainable.contains(p.group);
        let v = self.push(Cow::Borrowed(&p.value), Op::Leaf { param: Some(id) }, needs);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf { param: None }, false)
    }

    pub fn constant_ref(&mut self, m: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf { param: None }, false)
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let m = self.value(x).clone();
        self.constant(m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push_owned(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        self.push_owned(out, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push_owned(out, Op::Add(a, b), &[a, b])
    }

    /// Adds the `1×n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "add_row expects a row vector");
        assert_eq!(bias.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(bias.data()) {
                *o += bb;
            }
        }
        self.push_owned(out, Op::AddRow(a, b), &[a, b])
    }

    /// Multiplies every row of `a` elementwise by the `1×n` row `g`.
    pub fn mul_row(&mut self, a: Var, g: Var) -> Var {
        let gain = self.value(g);
        assert_eq!(gain.rows(), 1, "mul_row expects a row vector");
        assert_eq!(gain.cols(), self.value(a).cols(), "mul_row width mismatch");
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            for (o, gg) in out.row_mut(r).iter_mut().zip(gain.data()) {
                *o *= gg;
            }
        }
        self.push_owned(out, Op::MulRow(a, g), &[a, g])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push_owned(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push_owned(out, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push_owned(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_owned(out, Op::Sigmoid(a), &[a])
    }

    /// Row-wise softmax. `mask` (row-major, same shape as `a`) marks valid
    /// entries; invalid entries get exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let x = self.value(a);
        if let Some(m) = mask {
            assert_eq!(m.len(), x.len(), "softmax mask shape mismatch");
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let valid = |c: usize| mask.is_none_or(|m| m[r * x.cols() + c]);
            let max = (0..row.len())
                .filter(|&c| valid(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(r);
            let mut sum = 0.0;
            for c in 0..row.len() {
                if valid(c) {
                    o[c] = (row[c] - max).exp();
                    sum += o[c];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        self.push_owned(out, Op::Softmax(a), &[a])
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push_owned(out, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    /// Rows of `table` at `idx` (embedding lookup, row selection).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(idx.len(), t.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push_owned(
            out,
            Op::Gather {
                x: table,
                idx: idx.to_vec(),
            },
            &[table],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(m.data());
        }
        let out = Matrix::from_vec(rows, cols, data);
        self.push_owned(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push_owned(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push_owned(out, Op::SliceCols { x: a, start }, &[a])
    }

    /// Elementwise maximum; ties resolve to `a`, which also receives the gradient.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "maximum shape mismatch");
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| if p >= q { p } else { q })
            .collect();
        let out = Matrix::from_vec(x.rows(), x.cols(), data);
        self.push_owned(out, Op::Maximum(a, b), &[a, b])
    }

    /// Scales every row to unit L2 norm. Zero rows stay zero and pass no gradient.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let n = dot(row, row).sqrt();
            if n > 0.0 {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            norms.push(n);
        }
        self.push_owned(out, Op::RowNormalize { x: a, norms }, &[a])
    }

    /// Euclidean distances from a `1×d` query to each row of `candidates` (`1×n` result).
    pub fn l2_distances(&mut self, query: Var, candidates: Var) -> Var {
        let (q, c) = (self.value(query), self.value(candidates));
        assert_eq!(q.rows(), 1, "l2_distances expects a single query row");
        assert_eq!(q.cols(), c.cols(), "l2_distances width mismatch");
        let data = (0..c.rows())
            .map(|i| {
                q.data()
                    .iter()
                    .zip(c.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let out = Matrix::from_vec(1, c.rows(), data);
        self.push_owned(out, Op::L2Dist { query, candidates }, &[query, candidates])
    }

    /// `Σ_r −log softmax(x_r)[targets[r]]` as a 1×1 node.
    pub fn nll_rows(&mut self, x: Var, targets: &[usize]) -> Var {
        let m = self.value(x);
        assert_eq!(m.rows(), targets.len(), "nll_rows target count mismatch");
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = m.row(r);
            total += log_sum_exp(row) - row[t];
        }
        self.push_owned(
            Matrix::scalar(total),
            Op::NllRows {
                x,
                targets: targets.to_vec(),
            },
            &[x],
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`, with
    /// probabilities clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]`.
    pub fn bce_mean(&mut self, p: Var, labels: &[f64]) -> Var {
        let m = self.value(p);
        assert_eq!(m.len(), labels.len(), "bce_mean label count mismatch");
        let loss = bce_mean(m.data(), labels);
        self.push_owned(
            Matrix::scalar(loss),
            Op::BceMean {
                p,
                labels: labels.to_vec(),
            },
            &[p],
        )
    }

    /// Mean of squared differences over all entries.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mse_mean shape mismatch");
        let n = x.len() as f64;
        let loss = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            / n;
        self.push_owned(Matrix::scalar(loss), Op::MseMean(a, b), &[a, b])
    }

    /// `scale · Σ_anchors [ logsumexp_{n∈I} s[a,n] − mean_{p∈P} s[a,p] ]` over a
    /// square logit matrix `sim`.
    pub fn contrastive_nll(&mut self, sim: Var, anchors: Vec<ContrastiveAnchor>, scale: f64) -> Var {
        let s = self.value(sim);
        let mut total = 0.0;
        for a in &anchors {
            total += contrastive_term(s.row(a.row), a);
        }
        self.push_owned(
            Matrix::scalar(scale * total),
            Op::Contrastive {
                sim,
                anchors,
                scale,
            },
            &[sim],
        )
    }

    /// Weighted sum of 1×1 nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|(v, w)| w * self.value(*v).item()).sum();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push_owned(Matrix::scalar(total), Op::LinComb(terms.to_vec()), &inputs)
    }

    /// Inverted dropout when enabled via [`Graph::with_dropout`], identity otherwise.
    pub fn dropout(&mut self, a: Var) -> Var {
        let Some(state) = self.dropout.as_mut() else {
            return a;
        };
        let n = self.nodes[a.0].value.len();
        let keep = 1.0 - state.p;
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if state.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Matrix::from_vec(x.rows(), x.cols(), data);
        self.push_owned(out, Op::Dropout { x: a, mask }, &[a])
    }

    /// Back-propagates from the 1×1 node `loss` into parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar node");
        let mut out = Gradients::new(self.store.len());
        if !self.nodes[loss.0].needs_grad {
            return out;
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads, &mut out);
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<'a>, gy: &Matrix, grads: &mut [Option<Matrix>], out: &mut Gradients) {
        let y = &*node.value;
        match &node.op {
            Op::Leaf { param } => {
                if let Some(id) = param {
                    out.accumulate(*id, gy);
                }
            }
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gy.matmul_bt(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_at(gy));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gy.matmul(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, gy.matmul_at(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, column_sums(gy));
                }
            }
            Op::MulRow(a, g) => {
                let gain = self.value(*g);
                if self.requires_grad(*a) {
                    let mut da = gy.clone();
                    for r in 0..da.rows() {
                        for (d, gg) in da.row_mut(r).iter_mut().zip(gain.data()) {
                            *d *= gg;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*g) {
                    let x = self.value(*a);
                    let mut dg = Matrix::zeros(1, gain.cols());
                    for r in 0..x.rows() {
                        for ((d, xv), gv) in dg.data_mut().iter_mut().zip(x.row(r)).zip(gy.row(r)) {
                            *d += xv * gv;
                        }
                    }
                    self.accumulate(grads, *g, dg);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gy.map(|v| v * s)),
            Op::Relu(a) => {
                let d = zip_map(gy, y, |g, yv| if yv > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = zip_map(gy, y, |g, yv| g * (1.0 - yv * yv));
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(gy, y, |g, yv| g * yv * (1.0 - yv));
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let inner = dot(yr, gr);
                    for ((dv, yv), gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - inner);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                let n = y.cols() as f64;
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = dot(gr, yr) / n;
                    for ((dv, yv), gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dv = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Gather { x, idx } => {
                let (rows, cols) = self.shape(*x);
                let mut d = Matrix::zeros(rows, cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(gy.row(r)) {
                        *dv += gv;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.shape(*p);
                    if self.requires_grad(*p) {
                        let data = gy.data()[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(grads, *p, Matrix::from_vec(rows, cols, data));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.shape(*p);
                    if self.requires_grad(*p) {
                        let mut d = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            d.row_mut(r).copy_from_slice(&gy.row(r)[offset..offset + cols]);
                        }
                        self.accumulate(grads, *p, d);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.shape(*x);
                let mut d = Matrix::zeros(rows, cols);
                let len = gy.cols();
                for r in 0..rows {
                    d.row_mut(r)[*start..*start + len].copy_from_slice(gy.row(r));
                }
                self.accumulate(grads, *x, d);
            }
            Op::Maximum(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                let take_a: Vec<bool> = x.data().iter().zip(z.data()).map(|(p, q)| p >= q).collect();
                if self.requires_grad(*a) {
                    let data = gy.data().iter().zip(&take_a).map(|(g, &t)| if t { *g } else { 0.0 }).collect();
                    self.accumulate(grads, *a, Matrix::from_vec(gy.rows(), gy.cols(), data));
                }
                if self.requires_grad(*b) {
                    let data = gy.data().iter().zip(&take_a).map(|(g, &t)| if t { 0.0 } else { *g }).collect();
                    self.accumulate(grads, *b, Matrix::from_vec(gy.rows(), gy.cols(), data));
                }
            }
            Op::RowNormalize { x, norms } => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    if norms[r] == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let inner = dot(yr, gr);
                    for ((dv, yv), gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dv = (gv - yv * inner) / norms[r];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::L2Dist { query, candidates } => {
                let (q, c) = (self.value(*query), self.value(*candidates));
                let mut dq = Matrix::zeros(1, q.cols());
                let mut dc = Matrix::zeros(c.rows(), c.cols());
                for i in 0..c.rows() {
                    let dist = y.data()[i];
                    if dist == 0.0 {
                        continue;
                    }
                    let coef = gy.data()[i] / dist;
                    for k in 0..q.cols() {
                        let diff = q.data()[k] - c.get(i, k);
                        dq.data_mut()[k] += coef * diff;
                        dc.row_mut(i)[k] -= coef * diff;
                    }
                }
                if self.requires_grad(*query) {
                    self.accumulate(grads, *query, dq);
                }
                if self.requires_grad(*candidates) {
                    self.accumulate(grads, *candidates, dc);
                }
            }
            Op::NllRows { x, targets } => {
                let m = self.value(*x);
                let g = gy.item();
                let mut d = Matrix::zeros(m.rows(), m.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let row = m.row(r);
                    let lse = log_sum_exp(row);
                    for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = g * (row[c] - lse).exp();
                    }
                    d.row_mut(r)[t] -= g;
                }
                self.accumulate(grads, *x, d);
            }
            Op::BceMean { p, labels } => {
                let m = self.value(*p);
                let n = labels.len() as f64;
                let g = gy.item();
                let data = m
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&pv, &yv)| {
                        if pv <= PROB_CLAMP || pv >= 1.0 - PROB_CLAMP {
                            0.0
                        } else {
                            g * (-yv / pv + (1.0 - yv) / (1.0 - pv)) / n
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, Matrix::from_vec(m.rows(), m.cols(), data));
            }
            Op::MseMean(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                let coef = 2.0 * gy.item() / x.len() as f64;
                let d = zip_map(x, z, |p, q| coef * (p - q));
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, d.map(|v| -v));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Contrastive { sim, anchors, scale } => {
                let s = self.value(*sim);
                let g = gy.item() * scale;
                let mut d = Matrix::zeros(s.rows(), s.cols());
                for a in anchors {
                    let row = s.row(a.row);
                    let max = a.denominators.iter().map(|&n| row[n]).fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = a.denominators.iter().map(|&n| (row[n] - max).exp()).sum();
                    let drow = d.row_mut(a.row);
                    for &n in &a.denominators {
                        drow[n] += g * (row[n] - max).exp() / sum;
                    }
                    let w = g / a.positives.len() as f64;
                    for &p in &a.positives {
                        drow[p] -= w;
                    }
                }
                self.accumulate(grads, *sim, d);
            }
            Op::LinComb(terms) => {
                for (v, w) in terms {
                    self.accumulate(grads, *v, Matrix::scalar(w * gy.item()));
                }
            }
            Op::Dropout { x, mask } => {
                let data = gy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *x, Matrix::from_vec(gy.rows(), gy.cols(), data));
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub(crate) fn bce_mean(p: &[f64], y: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&pv, &yv)| {
            let pc = clamp_prob(pv);
            -(yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln())
        })
        .sum();
    total / p.len() as f64
}

pub(crate) fn contrastive_term(row: &[f64], anchor: &ContrastiveAnchor) -> f64 {
    let max = anchor
        .denominators
        .iter()
        .map(|&n| row[n])
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + anchor
            .denominators
            .iter()
            .map(|&n| (row[n] - max).exp())
            .sum::<f64>()
            .ln();
    let mean_pos = anchor.positives.iter().map(|&p| row[p]).sum::<f64>() / anchor.positives.len() as f64;
    lse - mean_pos
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}
