//! Scalar-loop reference implementations and fixtures shared by the
//! integration tests. Nothing here calls the library's vectorized math.

#![allow(dead_code)]

use std::collections::BTreeSet;

use dsdn::corpus::{Dialogue, Schema, SlotDef, Turn, NONE_VALUE};
use dsdn::nn::{LayerNorm, Linear, MultiHeadAttention, TransformerLayer};
use dsdn::params::ParamStore;
use dsdn::tensor::Matrix;
use rand::Rng;

pub const LN_EPS: f64 = 1e-12;

pub fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn rand_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| rand_vec(rng, cols)).collect()
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows)
}

pub fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// `y_o = Σ_i W[o][i] x_i + b_o`, with `W` stored `out × in`.
pub fn linear(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.value(l.weight);
    let mut y = vec![0.0; w.rows()];
    for (o, yo) in y.iter_mut().enumerate() {
        for (i, xi) in x.iter().enumerate() {
            *yo += w.get(o, i) * xi;
        }
        if let Some(b) = l.bias {
            *yo += store.value(b).get(0, o);
        }
    }
    y
}

pub fn layer_norm(store: &ParamStore, ln: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let (gain, bias) = (store.value(ln.gain), store.value(ln.bias));
    x.iter()
        .enumerate()
        .map(|(k, v)| (v - mean) / (var + LN_EPS).sqrt() * gain.get(0, k) + bias.get(0, k))
        .collect()
}

/// Multi-head attention, one query at a time, one head at a time:
/// `softmax(q_h·k_h/√d_k)` over the keys `visible` admits, then `W_o`.
pub fn attention(
    store: &ParamStore,
    mha: &MultiHeadAttention,
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    visible: &dyn Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let dk = mha.d_model / mha.n_heads;
    let k_proj: Vec<Vec<f64>> = keys.iter().map(|k| linear(store, &mha.key, k)).collect();
    let v_proj: Vec<Vec<f64>> = keys.iter().map(|k| linear(store, &mha.value, k)).collect();
    queries
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            let qp = linear(store, &mha.query, q);
            let mut concat = vec![0.0; mha.d_model];
            for h in 0..mha.n_heads {
                let cols = h * dk..(h + 1) * dk;
                let mut scores = Vec::new();
                for (ki, kp) in k_proj.iter().enumerate() {
                    if visible(qi, ki) {
                        let mut s = 0.0;
                        for c in cols.clone() {
                            s += qp[c] * kp[c];
                        }
                        scores.push((ki, s / (dk as f64).sqrt()));
                    }
                }
                let m = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s.1 - m).exp()).sum();
                for (ki, s) in scores {
                    let w = (s - m).exp() / z;
                    for c in cols.clone() {
                        concat[c] += w * v_proj[ki][c];
                    }
                }
            }
            linear(store, &mha.output, &concat)
        })
        .collect()
}

pub fn all_visible(_: usize, _: usize) -> bool {
    true
}

/// Post-LN encoder layer over one unmasked sequence.
pub fn transformer_layer(store: &ParamStore, layer: &TransformerLayer, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let att = attention(store, &layer.attention, xs, xs, &all_visible);
    xs.iter()
        .zip(att)
        .map(|(x, a)| {
            let h: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
            let h = layer_norm(store, &layer.attention_norm, &h);
            let inner: Vec<f64> = linear(store, &layer.ffn.inner, &h).into_iter().map(|v| v.max(0.0)).collect();
            let f = linear(store, &layer.ffn.outer, &inner);
            let out: Vec<f64> = h.iter().zip(&f).map(|(p, q)| p + q).collect();
            layer_norm(store, &layer.ffn_norm, &out)
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 − 1e-7]`.
/// `probs[j][t]`, `labels[j][t]`.
pub fn bce_oracle(probs: &[Vec<f64>], labels: &[Vec<u8>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for (pj, yj) in probs.iter().zip(labels) {
        for (&p, &y) in pj.iter().zip(yj) {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            let y = y as f64;
            total += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            n += 1.0;
        }
    }
    total / n
}

/// `1/(T·J) Σ_{t,j} (1/d) Σ_k (a − b)²`, inputs indexed `[t][j][k]`.
pub fn mse_oracle(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    let mut cells = 0.0;
    for t in 0..a.len() {
        for j in 0..a[t].len() {
            let d = a[t][j].len() as f64;
            let mut s = 0.0;
            for k in 0..a[t][j].len() {
                s += (a[t][j][k] - b[t][j][k]).powi(2);
            }
            total += s / d;
            cells += 1.0;
        }
    }
    total / cells
}

/// `−log softmax(−‖o − h_v‖)[gold]` for one cell.
pub fn value_nll_oracle(o: &[f64], candidates: &[Vec<f64>], gold: usize) -> f64 {
    let logits: Vec<f64> = candidates
        .iter()
        .map(|c| -o.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[gold]
}

/// `(P, N_turn, N_dialogue)` by direct enumeration; cells are `(slot, turn)`.
pub type Cells = BTreeSet<(usize, usize)>;

pub fn enumerate_sets(labels: &[Vec<u8>], j: usize, t: usize) -> (Cells, Cells, Cells) {
    let (n_slots, n_turns) = (labels.len(), labels[0].len());
    let mut p = Cells::new();
    let mut nt = Cells::new();
    let mut nd = Cells::new();
    for other in 0..n_slots {
        if other == j {
            continue;
        }
        if labels[other][t] == 1 {
            p.insert((other, t));
        } else {
            nt.insert((other, t));
        }
    }
    for tt in 0..n_turns {
        if tt != t {
            nd.insert((j, tt));
        }
    }
    (p, nt, nd)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// NT-Xent averaged over all `T·J` cells. `z[t][j]` is the projection of
/// slot `j` at turn `t`. Drops `N_dialogue` from the denominator when
/// `with_dialogue` is false.
pub fn nt_xent_oracle(z: &[Vec<Vec<f64>>], labels: &[Vec<u8>], tau: f64, with_dialogue: bool) -> f64 {
    let (n_slots, n_turns) = (labels.len(), labels[0].len());
    let mut total = 0.0;
    for t in 0..n_turns {
        for j in 0..n_slots {
            if labels[j][t] != 1 {
                continue;
            }
            let (p, nt, nd) = enumerate_sets(labels, j, t);
            if p.is_empty() {
                continue;
            }
            let mut denom = 0.0;
            let index: Vec<&(usize, usize)> = if with_dialogue {
                p.iter().chain(&nt).chain(&nd).collect()
            } else {
                p.iter().chain(&nt).collect()
            };
            for &&(s, tt) in &index {
                denom += (cos(&z[t][j], &z[tt][s]) / tau).exp();
            }
            let mut term = 0.0;
            for &(s, tt) in &p {
                term += ((cos(&z[t][j], &z[tt][s]) / tau).exp() / denom).ln();
            }
            total -= term / p.len() as f64;
        }
    }
    total / (n_slots * n_turns) as f64
}

/// A schema of `n` slots named `dom-slotK` with `k` values each plus "none".
pub fn small_schema(n: usize, k: usize) -> Schema {
    let slots = (0..n)
        .map(|s| SlotDef {
            name: format!("dom-slot{s}"),
            values: std::iter::once(NONE_VALUE.to_string())
                .chain((0..k).map(|v| format!("val{s}x{v}")))
                .collect(),
        })
        .collect();
    Schema::new(slots).unwrap()
}

/// A dialogue over [`small_schema`] where turn `t` sets the values given.
pub fn scripted_dialogue(schema: &Schema, id: &str, updates: &[Vec<(usize, usize)>]) -> Dialogue {
    let mut state = schema.empty_state();
    let mut turns = Vec::new();
    for (t, ups) in updates.iter().enumerate() {
        let mut words = Vec::new();
        for &(slot, value) in ups {
            let def = schema.slot(slot);
            state.insert(def.name.clone(), def.values[value].clone());
            words.push(format!("the {} is {}", def.slot(), def.values[value]));
        }
        turns.push(Turn {
            user: if words.is_empty() { "thanks".into() } else { words.join(" and ") },
            system: if t == 0 { String::new() } else { "ok".into() },
            state: state.clone(),
        });
    }
    Dialogue {
        id: id.into(),
        turns,
    }
}
