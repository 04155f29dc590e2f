//! Small pre-norm transformer encoder with deep prompt injection.
//!
//! At every layer listed in `prompt_layers` the encoder pools the text
//! positions of the previous hidden state, routes the pooled vector through
//! that layer's [`MeptLayerParams`] and prepends the composed prompt, replacing
//! whatever prompt rows the previous layer produced. Layers outside the set
//! keep carrying the most recent prompt rows (none before the first prompted
//! layer). Prompts carry no positional embedding and are attendable by every
//! position; padding keys are masked out. Classification reads the mean of the
//! final layer's non-pad text positions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::init::Init;
use crate::prompt::{compose_on, route_on, MeptLayerParams, RoutingMode};
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "mept-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The classification head starts small so the first loss sits near
/// `ln(n_classes)` whatever the scale of the pooled features.
pub const HEAD_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    pub prompt_len: usize,
    pub n_router_experts: usize,
    pub n_shared_experts: usize,
    /// 1-based layer indices that receive a fresh prompt. Empty disables prompting.
    pub prompt_layers: BTreeSet<usize>,
    pub routing_mode: RoutingMode,
    pub init: Init,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden_dim: 64,
            n_heads: 4,
            ffn_mult: 4,
            vocab_size: 256,
            max_seq_len: 64,
            n_classes: 3,
            prompt_len: 8,
            n_router_experts: 4,
            n_shared_experts: 1,
            prompt_layers: (1..=4).collect(),
            routing_mode: RoutingMode::Top1,
            init: Init::XavierNormal,
            activation: Activation::Gelu,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.hidden_dim == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return fail("n_layers, hidden_dim, n_heads and ffn_mult must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return fail(format!("hidden_dim {} not divisible by n_heads {}", self.hidden_dim, self.n_heads));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.n_classes < 2 {
            return fail("vocab_size and max_seq_len must be positive and n_classes >= 2".into());
        }
        if let Some(&bad) = self.prompt_layers.iter().find(|&&l| l == 0 || l > self.n_layers) {
            return fail(format!("prompt layer {bad} outside 1..={}", self.n_layers));
        }
        if !self.prompt_layers.is_empty() && (self.prompt_len == 0 || self.n_router_experts == 0) {
            return fail("prompting needs prompt_len >= 1 and n_router_experts >= 1".into());
        }
        self.routing_mode.validate()
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden_dim * self.ffn_mult
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Head,
    /// Routed and shared prompt experts.
    Prompt,
    Router,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

macro_rules! block_fields {
    ($m:ident) => {
        $m!(ln1_gamma, ln1_beta, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gamma, ln2_beta, w1, b1, w2, b2)
    };
}

impl Block {
    fn init(d: usize, ffn: usize, init: Init, rng: &mut dyn RngCore) -> Self {
        let lin = |i: usize, o: usize, rng: &mut dyn RngCore| init.sample(&[i, o], i, o, rng);
        Self {
            ln1_gamma: Tensor::full(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            wq: lin(d, d, rng),
            bq: Tensor::zeros(&[d]),
            wk: lin(d, d, rng),
            bk: Tensor::zeros(&[d]),
            wv: lin(d, d, rng),
            bv: Tensor::zeros(&[d]),
            wo: lin(d, d, rng),
            bo: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::full(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
            w1: lin(d, ffn, rng),
            b1: Tensor::zeros(&[ffn]),
            w2: lin(ffn, d, rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &Tensor)) {
        macro_rules! go {
            ($($name:ident),*) => { $( f(&format!("{prefix}.{}", stringify!($name)), ParamGroup::Backbone, &self.$name); )* };
        }
        block_fields!(go);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor)) {
        macro_rules! go {
            ($($name:ident),*) => { $( f(&format!("{prefix}.{}", stringify!($name)), ParamGroup::Backbone, &mut self.$name); )* };
        }
        block_fields!(go);
    }

    /// One pre-norm block over `x` (`[batch * seq, d]`).
    pub fn forward_on(
        &self,
        g: &mut Graph,
        x: Var,
        batch: usize,
        heads: usize,
        key_mask: &[bool],
        act: Activation,
    ) -> Result<Var> {
        let linear = |g: &mut Graph, x: Var, w: &Tensor, b: &Tensor| -> Result<Var> {
            let (w, b) = (g.param(w), g.param(b));
            let y = g.matmul(x, w)?;
            g.add_row(y, b)
        };
        let (g1, b1) = (g.param(&self.ln1_gamma), g.param(&self.ln1_beta));
        let a = g.layer_norm(x, g1, b1)?;
        let q = linear(g, a, &self.wq, &self.bq)?;
        let k = linear(g, a, &self.wk, &self.bk)?;
        let v = linear(g, a, &self.wv, &self.bv)?;
        let att = g.attention(q, k, v, batch, heads, key_mask)?;
        let o = linear(g, att, &self.wo, &self.bo)?;
        let x1 = g.add(x, o)?;
        let (g2, b2) = (g.param(&self.ln2_gamma), g.param(&self.ln2_beta));
        let a2 = g.layer_norm(x1, g2, b2)?;
        let h = linear(g, a2, &self.w1, &self.b1)?;
        let h = g.activate(h, act);
        let f = linear(g, h, &self.w2, &self.b2)?;
        g.add(x1, f)
    }
}

/// Routing outcome of one prompted layer for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRouting {
    pub layer_index: usize,
    /// `[batch, n_routed]`
    pub gate_probs: Tensor,
    pub selected: Vec<usize>,
    pub selected_prob: Vec<f64>,
}

/// Graph handles produced by [`Model::forward_on`].
#[derive(Debug, Clone)]
pub struct GraphForward {
    pub logits: Var,
    /// Text rows (`[batch * seq, d]`) after the embedding (index 0) and each layer.
    pub text_hidden: Vec<Var>,
    /// Prompt rows after each layer, when any exist.
    pub prompt_hidden: Vec<Option<Var>>,
    pub pooled: Var,
    pub routing: Vec<LayerRouting>,
    pub segments: Vec<Vec<usize>>,
}

/// Values recorded by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `hidden_states[l]` is `[batch, seq, d]`; index 0 is the embedding output.
    pub hidden_states: Vec<Tensor>,
    pub pad_mask: Vec<Vec<bool>>,
    /// One entry per prompted layer, in layer order.
    pub pathway: Vec<LayerRouting>,
    /// `[batch, n_classes]`
    pub logits: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<Block>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    /// One entry per prompted layer, ordered by `layer_index`.
    pub prompts: Vec<MeptLayerParams>,
}

/// Mean of `rows` of a row-major `[n, d]` buffer, accumulated in row order.
fn mean_rows(data: &[f64], d: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for &r in rows {
        out.iter_mut().zip(&data[r * d..(r + 1) * d]).for_each(|(o, v)| *o += v);
    }
    let inv = 1.0 / rows.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

impl Model {
    /// Initializes every parameter from `config.seed`. The backbone, the head
    /// and each prompt layer draw from separate streams, so two configs that
    /// differ only in their prompt settings share identical backbone weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, init) = (config.hidden_dim, config.init);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
        let token_embedding = init.sample(&[config.vocab_size, d], d, config.vocab_size, &mut rng);
        let position_embedding = init.sample(&[config.max_seq_len, d], d, config.max_seq_len, &mut rng);
        let blocks = (0..config.n_layers).map(|_| Block::init(d, config.ffn_dim(), init, &mut rng)).collect();
        let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2));
        let head_weight = crate::init::normal(&[d, config.n_classes], HEAD_INIT_STD, &mut head_rng);
        let mode = config.routing_mode;
        let routed = mode.routed_slots(config.n_router_experts, config.n_shared_experts);
        let shared = mode.shared_slots(config.n_shared_experts);
        let prompts = config
            .prompt_layers
            .iter()
            .map(|&layer| {
                let mut r = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1000 + layer as u64));
                MeptLayerParams::init(layer, routed, shared, config.prompt_len, d, init, &mut r)
            })
            .collect();
        Ok(Self {
            head_bias: Tensor::zeros(&[config.n_classes]),
            config,
            token_embedding,
            position_embedding,
            blocks,
            head_weight,
            prompts,
        })
    }

    pub fn prompt_params(&self, layer: usize) -> Option<&MeptLayerParams> {
        self.prompts.iter().find(|p| p.layer_index == layer)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, ParamGroup, &Tensor)) {
        f("embed.token", ParamGroup::Backbone, &self.token_embedding);
        f("embed.position", ParamGroup::Backbone, &self.position_embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        f("head.weight", ParamGroup::Head, &self.head_weight);
        f("head.bias", ParamGroup::Head, &self.head_bias);
        for p in &self.prompts {
            let l = p.layer_index;
            f(&format!("prompts.{l}.router_experts"), ParamGroup::Prompt, &p.router_experts);
            if let Some(s) = &p.shared_experts {
                f(&format!("prompts.{l}.shared_experts"), ParamGroup::Prompt, s);
            }
            f(&format!("prompts.{l}.router_weight"), ParamGroup::Router, &p.router_weight);
            f(&format!("prompts.{l}.router_bias"), ParamGroup::Router, &p.router_bias);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor)) {
        f("embed.token", ParamGroup::Backbone, &mut self.token_embedding);
        f("embed.position", ParamGroup::Backbone, &mut self.position_embedding);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        f("head.weight", ParamGroup::Head, &mut self.head_weight);
        f("head.bias", ParamGroup::Head, &mut self.head_bias);
        for p in &mut self.prompts {
            let l = p.layer_index;
            f(&format!("prompts.{l}.router_experts"), ParamGroup::Prompt, &mut p.router_experts);
            if let Some(s) = &mut p.shared_experts {
                f(&format!("prompts.{l}.shared_experts"), ParamGroup::Prompt, s);
            }
            f(&format!("prompts.{l}.router_weight"), ParamGroup::Router, &mut p.router_weight);
            f(&format!("prompts.{l}.router_bias"), ParamGroup::Router, &mut p.router_bias);
        }
    }

    /// Sets `requires_grad` on every parameter from its group.
    pub fn set_trainable(&mut self, trainable: impl Fn(ParamGroup) -> bool) {
        self.visit_mut(&mut |_, group, t| t.set_requires_grad(trainable(group)));
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, _, t| t.zero_grad());
    }

    /// Moves gradients recorded on `g` into the parameters' `grad` buffers.
    pub fn collect_grads(&mut self, g: &Graph) {
        self.visit_mut(&mut |_, _, t| g.param_grads(t));
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, t| n += t.numel());
        n
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn param_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        self.visit(&mut |name, _, t| {
            h.update(name.as_bytes());
            for s in t.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    fn check_batch(&self, batch: &Batch) -> Result<(usize, Vec<Vec<usize>>)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset("empty batch".into()));
        }
        let seq = batch.token_ids[0].len();
        if seq > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: seq, max: self.config.max_seq_len });
        }
        let mut segments = Vec::with_capacity(batch.len());
        for (i, (toks, mask)) in batch.token_ids.iter().zip(&batch.pad_mask).enumerate() {
            if toks.len() != seq || mask.len() != seq {
                return Err(Error::Shape { op: "batch", lhs: vec![seq], rhs: vec![toks.len(), mask.len()] });
            }
            if let Some(&token) = toks.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::TokenOutOfRange { token, vocab: self.config.vocab_size });
            }
            let rows: Vec<usize> = (0..seq).filter(|&p| mask[p]).map(|p| i * seq + p).collect();
            if rows.is_empty() {
                return Err(Error::EmptyPool(i));
            }
            segments.push(rows);
        }
        Ok((seq, segments))
    }

    /// Records a forward pass on `g`. `rng` feeds the stochastic routing modes.
    pub fn forward_on(&self, g: &mut Graph, batch: &Batch, rng: &mut dyn RngCore) -> Result<GraphForward> {
        let cfg = &self.config;
        let (seq, segments) = self.check_batch(batch)?;
        let b = batch.len();
        let tokens: Vec<usize> = batch.token_ids.iter().flatten().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..b * seq).map(|i| i % seq).collect();
        let text_mask: Vec<bool> = batch.pad_mask.iter().flatten().copied().collect();

        let emb = g.param(&self.token_embedding);
        let pos = g.param(&self.position_embedding);
        let tok = g.select_rows(emb, &tokens)?;
        let pe = g.select_rows(pos, &positions)?;
        let mut text = g.add(tok, pe)?;

        let mut text_hidden = vec![text];
        let mut prompt_hidden = vec![None];
        let mut routing = Vec::new();
        let mut prompt: Option<Var> = None;
        let m = cfg.prompt_len;
        let joint_mask: Vec<bool> =
            batch.pad_mask.iter().flat_map(|row| std::iter::repeat_n(true, m).chain(row.iter().copied())).collect();

        for (li, block) in self.blocks.iter().enumerate() {
            let layer = li + 1;
            if let Some(params) = self.prompt_params(layer) {
                let pooled = g.segment_mean(text, segments.clone())?;
                let r = route_on(g, params, pooled, cfg.routing_mode, rng)?;
                let p = compose_on(g, params, r.gate_probs, &r.selected, cfg.routing_mode)?;
                routing.push(LayerRouting {
                    layer_index: layer,
                    gate_probs: g.value(r.gate_probs).clone(),
                    selected: r.selected,
                    selected_prob: r.selected_prob,
                });
                prompt = Some(p);
            }
            match prompt {
                Some(p) => {
                    let x = g.interleave(p, text, b)?;
                    let y = block.forward_on(g, x, b, cfg.n_heads, &joint_mask, cfg.activation)?;
                    prompt = Some(g.blocks(y, b, 0, m)?);
                    text = g.blocks(y, b, m, seq)?;
                }
                None => text = block.forward_on(g, text, b, cfg.n_heads, &text_mask, cfg.activation)?,
            }
            text_hidden.push(text);
            prompt_hidden.push(prompt);
        }

        let pooled = g.segment_mean(text, segments.clone())?;
        let (hw, hb) = (g.param(&self.head_weight), g.param(&self.head_bias));
        let logits = g.matmul(pooled, hw)?;
        let logits = g.add_row(logits, hb)?;
        Ok(GraphForward { logits, text_hidden, prompt_hidden, pooled, routing, segments })
    }

    /// Mean cross-entropy of the batch, recorded on `g`.
    pub fn loss_on(&self, g: &mut Graph, batch: &Batch, rng: &mut dyn RngCore) -> Result<(Var, GraphForward)> {
        let fwd = self.forward_on(g, batch, rng)?;
        if let Some(&label) = batch.labels.iter().find(|&&l| l >= self.config.n_classes) {
            return Err(Error::LabelOutOfRange { label, classes: self.config.n_classes });
        }
        let loss = g.cross_entropy(fwd.logits, &batch.labels)?;
        Ok((loss, fwd))
    }

    /// Forward pass returning plain values. With `record_trace == false` the
    /// hidden states are omitted.
    pub fn forward(&self, batch: &Batch, record_trace: bool, rng: &mut dyn RngCore) -> Result<ForwardTrace> {
        let mut g = Graph::new();
        let fwd = self.forward_on(&mut g, batch, rng)?;
        let (b, d) = (batch.len(), self.config.hidden_dim);
        let seq = batch.token_ids[0].len();
        let hidden_states = if record_trace {
            fwd.text_hidden.iter().map(|&v| g.value(v).reshape(&[b, seq, d])).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(ForwardTrace {
            hidden_states,
            pad_mask: batch.pad_mask.clone(),
            pathway: fwd.routing,
            logits: g.value(fwd.logits).clone(),
        })
    }

    /// Argmax predictions for a batch.
    pub fn predict(&self, batch: &Batch, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
        let trace = self.forward(batch, false, rng)?;
        Ok((0..batch.len()).map(|r| crate::prompt::argmax(trace.logits.row(r))).collect())
    }

    // ---- checkpoints ------------------------------------------------------

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = BTreeMap::new();
        self.visit(&mut |name, _, t| {
            params.insert(name.to_string(), TensorRecord { shape: t.shape().to_vec(), data: t.data().to_vec() });
        });
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format {} v{}", ckpt.format, ckpt.version)));
        }
        let mut model = Model::new(ckpt.config.clone())?;
        let mut problem = None;
        let mut seen = 0;
        model.visit_mut(&mut |name, _, t| match ckpt.params.get(name) {
            Some(rec) if rec.shape == t.shape() && rec.data.len() == t.numel() => {
                t.data_mut().copy_from_slice(&rec.data);
                seen += 1;
            }
            Some(rec) => problem = Some(format!("{name}: shape {:?}, expected {:?}", rec.shape, t.shape())),
            None => problem = Some(format!("missing parameter {name}")),
        });
        if let Some(p) = problem {
            return Err(Error::Checkpoint(p));
        }
        if seen != ckpt.params.len() {
            return Err(Error::Checkpoint("checkpoint has parameters the config does not define".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Pools `trace.hidden_states[layer]` over each example's non-pad positions.
pub fn pool_features(trace: &ForwardTrace, layer: usize) -> Result<Tensor> {
    let h = trace
        .hidden_states
        .get(layer)
        .ok_or_else(|| Error::Config(format!("layer {layer} not recorded ({} states)", trace.hidden_states.len())))?;
    let (b, seq, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let mut out = Vec::with_capacity(b * d);
    for (i, mask) in trace.pad_mask.iter().enumerate().take(b) {
        let rows: Vec<usize> = (0..seq).filter(|&p| mask[p]).map(|p| i * seq + p).collect();
        if rows.is_empty() {
            return Err(Error::EmptyPool(i));
        }
        out.extend(mean_rows(h.data(), d, &rows));
    }
    Tensor::new(vec![b, d], out)
}

/// Serialized model: config plus every parameter by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: BTreeMap<String, TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}
