//! Straight-line reference encoder used as an oracle: plain loops over
//! `Vec<Vec<f64>>`, one unpadded example at a time, no graph.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;

use mept_core::model::Block;
use mept_core::{Model, RoutingMode};

pub type Mat = Vec<Vec<f64>>;

fn row_of(t: &mept_core::Tensor, i: usize) -> Vec<f64> {
    t.row(i).to_vec()
}

/// `x @ w + b` with `w` stored `[in, out]` row-major.
fn linear(x: &Mat, w: &mept_core::Tensor, b: &mept_core::Tensor) -> Mat {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|r| {
            (0..dout)
                .map(|o| {
                    let mut s = b.data()[o];
                    for i in 0..din {
                        s += r[i] * w.data()[i * dout + o];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, g: &mept_core::Tensor, b: &mept_core::Tensor) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(k, v)| (v - mean) * inv * g.data()[k] + b.data()[k]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn block(blk: &Block, x: &Mat, heads: usize, gelu_act: bool) -> Mat {
    let d = x[0].len();
    let dh = d / heads;
    let a = layer_norm(x, &blk.ln1_gamma, &blk.ln1_beta);
    let q = linear(&a, &blk.wq, &blk.bq);
    let k = linear(&a, &blk.wk, &blk.bk);
    let v = linear(&a, &blk.wv, &blk.bv);
    let n = x.len();
    let mut att = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> =
                (0..n).map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()).collect();
            let p = softmax(&scores);
            for c in cols.clone() {
                att[i][c] = (0..n).map(|j| p[j] * v[j][c]).sum();
            }
        }
    }
    let x1 = add(x, &linear(&att, &blk.wo, &blk.bo));
    let a2 = layer_norm(&x1, &blk.ln2_gamma, &blk.ln2_beta);
    let mut h = linear(&a2, &blk.w1, &blk.b1);
    for r in &mut h {
        for v in r.iter_mut() {
            *v = if gelu_act { gelu(*v) } else { relu(*v) };
        }
    }
    add(&x1, &linear(&h, &blk.w2, &blk.b2))
}

fn mean_rows(x: &[Vec<f64>]) -> Vec<f64> {
    let d = x[0].len();
    (0..d).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / x.len() as f64).collect()
}

fn embed(model: &Model, tokens: &[u32]) -> Mat {
    tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            let e = row_of(&model.token_embedding, t as usize);
            let pe = row_of(&model.position_embedding, p);
            e.iter().zip(&pe).map(|(a, b)| a + b).collect()
        })
        .collect()
}

/// Deep prompt tuning: at each layer in `prompts` the given `m x d` rows are
/// prepended (replacing earlier prompt rows); other layers carry the current
/// prompt rows along. Returns the logits.
pub fn deep_prompt_logits(model: &Model, tokens: &[u32], prompts: &BTreeMap<usize, Mat>) -> Vec<f64> {
    let cfg = &model.config;
    let gelu_act = matches!(cfg.activation, mept_core::Activation::Gelu);
    let mut text = embed(model, tokens);
    let mut prompt: Mat = Vec::new();
    for (li, blk) in model.blocks.iter().enumerate() {
        if let Some(p) = prompts.get(&(li + 1)) {
            prompt = p.clone();
        }
        let m = prompt.len();
        let joint: Mat = prompt.iter().chain(text.iter()).cloned().collect();
        let out = block(blk, &joint, cfg.n_heads, gelu_act);
        prompt = out[..m].to_vec();
        text = out[m..].to_vec();
    }
    let pooled = mean_rows(&text);
    linear(&vec![pooled], &model.head_weight, &model.head_bias).remove(0)
}

/// Prompt rows `[m][d]` of expert slab `e` of a `[n, m, d]` tensor.
pub fn slab(t: &mept_core::Tensor, e: usize) -> Mat {
    let (m, d) = (t.shape()[1], t.shape()[2]);
    (0..m).map(|r| t.data()[(e * m + r) * d..(e * m + r + 1) * d].to_vec()).collect()
}

/// Reference forward of one unpadded example.
pub struct RefTrace {
    pub logits: Vec<f64>,
    /// Mean of the text rows after the embedding (index 0) and each layer.
    pub pooled: Vec<Vec<f64>>,
    /// Router distribution per prompted layer, keyed by layer index.
    pub gates: BTreeMap<usize, Vec<f64>>,
}

/// Full MEPT forward with deterministic Top-1 (or Dense) routing, coded from
/// the routing rule directly rather than through the library's graph ops.
pub fn mept_trace(model: &Model, tokens: &[u32]) -> RefTrace {
    let cfg = &model.config;
    let gelu_act = matches!(cfg.activation, mept_core::Activation::Gelu);
    let mut text = embed(model, tokens);
    let mut prompt: Mat = Vec::new();
    let mut pooled_layers = vec![mean_rows(&text)];
    let mut gates = BTreeMap::new();
    for (li, blk) in model.blocks.iter().enumerate() {
        if let Some(pp) = model.prompt_params(li + 1) {
            let pooled = mean_rows(&text);
            let logits = linear(&vec![pooled], &pp.router_weight, &pp.router_bias).remove(0);
            let probs = softmax(&logits);
            let mut best = 0;
            for i in 1..probs.len() {
                if probs[i] > probs[best] {
                    best = i;
                }
            }
            let (m, d) = (pp.prompt_len(), pp.dim());
            let mut p = vec![vec![0.0; d]; m];
            let weights: Vec<(usize, f64)> = match cfg.routing_mode {
                RoutingMode::Dense => probs.iter().copied().enumerate().collect(),
                _ => vec![(best, probs[best])],
            };
            for (e, w) in weights {
                for (r, row) in slab(&pp.router_experts, e).iter().enumerate() {
                    for c in 0..d {
                        p[r][c] += w * row[c];
                    }
                }
            }
            if let (false, Some(shared)) = (matches!(cfg.routing_mode, RoutingMode::NoShared), &pp.shared_experts) {
                for s in 0..shared.shape()[0] {
                    for (r, row) in slab(shared, s).iter().enumerate() {
                        for c in 0..d {
                            p[r][c] += row[c];
                        }
                    }
                }
            }
            gates.insert(li + 1, probs);
            prompt = p;
        }
        let m = prompt.len();
        let joint: Mat = prompt.iter().chain(text.iter()).cloned().collect();
        let out = block(blk, &joint, cfg.n_heads, gelu_act);
        prompt = out[..m].to_vec();
        text = out[m..].to_vec();
        pooled_layers.push(mean_rows(&text));
    }
    let pooled = pooled_layers.last().unwrap().clone();
    let logits = linear(&vec![pooled], &model.head_weight, &model.head_bias).remove(0);
    RefTrace { logits, pooled: pooled_layers, gates }
}

pub fn mept_logits(model: &Model, tokens: &[u32]) -> Vec<f64> {
    mept_trace(model, tokens).logits
}
