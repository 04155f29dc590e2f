//! Mixture-of-expert prompt layer.
//!
//! Each prompted transformer layer owns a bank of routed prompt experts, a bank
//! of shared experts and a linear-softmax router. For every example the router
//! scores the routed experts from the mean-pooled hidden state of the previous
//! layer; the composed prompt is
//!
//! ```text
//! P = gate[i*] * R[i*] + (S[0] + ... + S[n_shared - 1])
//! ```
//!
//! where `i*` is the highest-probability expert. [`RoutingMode`] switches in the
//! router variants used for ablations (random, dense, Gumbel, perturbed, and
//! two shared-expert variants).

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gumbel, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::model::ModelConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoutingMode {
    /// Highest-probability expert, scaled by its gate.
    #[default]
    Top1,
    /// Uniformly random expert, scaled by its gate.
    Stochastic,
    /// Every routed expert weighted by its gate.
    Dense,
    /// Top-1 over `softmax((logits + Gumbel(0, 1)) / temperature)`.
    GumbelSoftmax { temperature: f64 },
    /// Top-1 over `softmax(logits + N(0, sigma^2))`.
    Perturbation { sigma: f64 },
    /// Top-1 with the shared-expert term removed.
    NoShared,
    /// Top-1 where every shared slot becomes one more routed slot.
    ReplaceShared,
}

impl RoutingMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RoutingMode::GumbelSoftmax { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(Error::Config(format!("gumbel temperature must be > 0, got {temperature}")))
            }
            RoutingMode::Perturbation { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("perturbation sigma must be >= 0, got {sigma}")))
            }
            _ => Ok(()),
        }
    }

    /// `false` only for [`RoutingMode::Dense`].
    pub fn is_sparse(&self) -> bool {
        !matches!(self, RoutingMode::Dense)
    }

    /// Number of routed slots given the configured counts.
    pub fn routed_slots(&self, n_router: usize, n_shared: usize) -> usize {
        match self {
            RoutingMode::ReplaceShared => n_router + n_shared,
            _ => n_router,
        }
    }

    /// Number of shared slots actually allocated.
    pub fn shared_slots(&self, n_shared: usize) -> usize {
        match self {
            RoutingMode::NoShared | RoutingMode::ReplaceShared => 0,
            _ => n_shared,
        }
    }

    pub fn name(&self) -> String {
        match self {
            RoutingMode::Top1 => "top1".into(),
            RoutingMode::Stochastic => "stochastic".into(),
            RoutingMode::Dense => "dense".into(),
            RoutingMode::GumbelSoftmax { temperature } => format!("gumbel_softmax(t={temperature})"),
            RoutingMode::Perturbation { sigma } => format!("perturbation(sigma={sigma})"),
            RoutingMode::NoShared => "no_shared".into(),
            RoutingMode::ReplaceShared => "replace_shared".into(),
        }
    }
}

/// Prompt parameters of one transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MeptLayerParams {
    /// 1-based index of the layer these prompts feed.
    pub layer_index: usize,
    /// `[n_routed, m, d]`
    pub router_experts: Tensor,
    /// `[n_shared, m, d]`; `None` when there are no shared experts.
    pub shared_experts: Option<Tensor>,
    /// `[d, n_routed]`
    pub router_weight: Tensor,
    /// `[n_routed]`
    pub router_bias: Tensor,
}

impl MeptLayerParams {
    pub fn zeros(layer_index: usize, n_routed: usize, n_shared: usize, prompt_len: usize, dim: usize) -> Self {
        Self {
            layer_index,
            router_experts: Tensor::zeros(&[n_routed, prompt_len, dim]),
            shared_experts: (n_shared > 0).then(|| Tensor::zeros(&[n_shared, prompt_len, dim])),
            router_weight: Tensor::zeros(&[dim, n_routed]),
            router_bias: Tensor::zeros(&[n_routed]),
        }
    }

    /// Expert slabs are drawn as `m x d` matrices; the router as a `d x n_routed` linear map.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        layer_index: usize,
        n_routed: usize,
        n_shared: usize,
        prompt_len: usize,
        dim: usize,
        init: Init,
        rng: &mut dyn RngCore,
    ) -> Self {
        Self {
            layer_index,
            router_experts: init.sample(&[n_routed, prompt_len, dim], dim, prompt_len, rng),
            shared_experts: (n_shared > 0).then(|| init.sample(&[n_shared, prompt_len, dim], dim, prompt_len, rng)),
            router_weight: init.sample(&[dim, n_routed], dim, n_routed, rng),
            router_bias: Tensor::zeros(&[n_routed]),
        }
    }

    pub fn n_routed(&self) -> usize {
        self.router_experts.shape()[0]
    }

    pub fn n_shared(&self) -> usize {
        self.shared_experts.as_ref().map_or(0, |s| s.shape()[0])
    }

    pub fn prompt_len(&self) -> usize {
        self.router_experts.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.router_experts.shape()[2]
    }

    pub fn is_finite(&self) -> bool {
        self.router_experts.is_finite()
            && self.shared_experts.as_ref().is_none_or(Tensor::is_finite)
            && self.router_weight.is_finite()
            && self.router_bias.is_finite()
    }
}

/// Router output for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// `[batch, n_routed]`, each row a probability vector.
    pub gate_probs: Tensor,
    /// Chosen expert per example (argmax for every mode but `Stochastic`;
    /// reported as the argmax for `Dense` even though all experts are used).
    pub selected: Vec<usize>,
    pub selected_prob: Vec<f64>,
}

/// Router output while recording on a graph.
#[derive(Debug, Clone)]
pub struct GraphRoute {
    pub gate_probs: Var,
    pub selected: Vec<usize>,
    pub selected_prob: Vec<f64>,
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Routes `pooled` (`[batch, d]`, a graph node) through the layer's router.
pub fn route_on(
    g: &mut Graph,
    params: &MeptLayerParams,
    pooled: Var,
    mode: RoutingMode,
    rng: &mut dyn RngCore,
) -> Result<GraphRoute> {
    mode.validate()?;
    let d = params.router_weight.shape()[0];
    let ps = g.shape(pooled).to_vec();
    if ps.len() != 2 || ps[1] != d {
        return Err(Error::Shape { op: "route", lhs: ps, rhs: params.router_weight.shape().to_vec() });
    }
    let batch = ps[0];
    let n = params.n_routed();
    let w = g.param(&params.router_weight);
    let b = g.param(&params.router_bias);
    let logits = g.matmul(pooled, w)?;
    let mut logits = g.add_row(logits, b)?;
    match mode {
        RoutingMode::GumbelSoftmax { temperature } => {
            let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");
            let noise: Vec<f64> = (0..batch * n).map(|_| gumbel.sample(rng)).collect();
            let noise = g.constant(Tensor::from_parts(vec![batch, n], noise));
            let noisy = g.add(logits, noise)?;
            logits = g.scale(noisy, 1.0 / temperature);
        }
        RoutingMode::Perturbation { sigma } => {
            let normal = Normal::new(0.0, sigma).expect("valid sigma");
            let noise: Vec<f64> = (0..batch * n).map(|_| normal.sample(rng)).collect();
            let noise = g.constant(Tensor::from_parts(vec![batch, n], noise));
            logits = g.add(logits, noise)?;
        }
        _ => {}
    }
    let gate_probs = g.softmax(logits, 1)?;
    let probs = g.value(gate_probs);
    let selected: Vec<usize> = (0..batch)
        .map(|r| match mode {
            RoutingMode::Stochastic => rng.random_range(0..n),
            _ => argmax(probs.row(r)),
        })
        .collect();
    let selected_prob = selected.iter().enumerate().map(|(r, &i)| probs.row(r)[i]).collect();
    Ok(GraphRoute { gate_probs, selected, selected_prob })
}

/// Composes the per-example prompt, returned as `[batch * m, d]` rows.
pub fn compose_on(
    g: &mut Graph,
    params: &MeptLayerParams,
    gate_probs: Var,
    selected: &[usize],
    mode: RoutingMode,
) -> Result<Var> {
    let (n, m, d) = (params.n_routed(), params.prompt_len(), params.dim());
    let gs = g.shape(gate_probs).to_vec();
    if gs.len() != 2 || gs[1] != n || gs[0] != selected.len() {
        return Err(Error::Shape { op: "compose_prompt", lhs: gs, rhs: vec![selected.len(), n] });
    }
    if let Some(&index) = selected.iter().find(|&&i| i >= n) {
        return Err(Error::ExpertOutOfRange { index, count: n });
    }
    let batch = selected.len();
    let experts = g.param(&params.router_experts);
    let experts = g.reshape(experts, &[n, m * d])?;
    let weights = if mode.is_sparse() {
        let mut mask = vec![0.0; batch * n];
        for (r, &i) in selected.iter().enumerate() {
            mask[r * n + i] = 1.0;
        }
        let mask = g.constant(Tensor::from_parts(vec![batch, n], mask));
        g.mul(gate_probs, mask)?
    } else {
        gate_probs
    };
    // Non-selected rows of `weights` are exactly zero, so their experts get zero gradient.
    let mut prompt = g.matmul(weights, experts)?;
    let use_shared = !matches!(mode, RoutingMode::NoShared);
    if let (true, Some(shared)) = (use_shared, &params.shared_experts) {
        let k = shared.shape()[0];
        let s = g.param(shared);
        let s = g.reshape(s, &[k, m * d])?;
        let ones = g.constant(Tensor::full(&[batch, k], 1.0));
        let se = g.matmul(ones, s)?;
        prompt = g.add(prompt, se)?;
    }
    g.reshape(prompt, &[batch * m, d])
}

/// Routes a batch of pooled hidden states (`[batch, d]`).
pub fn route(
    params: &MeptLayerParams,
    pooled_hidden: &Tensor,
    mode: RoutingMode,
    rng: &mut dyn RngCore,
) -> Result<RoutingDecision> {
    let mut g = Graph::new();
    let pooled = g.constant(pooled_hidden.clone());
    let r = route_on(&mut g, params, pooled, mode, rng)?;
    Ok(RoutingDecision {
        gate_probs: g.value(r.gate_probs).clone(),
        selected: r.selected,
        selected_prob: r.selected_prob,
    })
}

/// Composed prompts as a `[batch, m, d]` tensor.
pub fn compose_prompt(params: &MeptLayerParams, decision: &RoutingDecision, mode: RoutingMode) -> Result<Tensor> {
    let mut g = Graph::new();
    let gates = g.constant(decision.gate_probs.clone());
    let p = compose_on(&mut g, params, gates, &decision.selected, mode)?;
    let batch = decision.selected.len();
    g.value(p).reshape(&[batch, params.prompt_len(), params.dim()])
}

/// Trainable-parameter accounting for a model configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub prompt_params: usize,
    pub router_params: usize,
    pub total: usize,
    /// Prompt-expert rows that contribute to one forward pass at one layer.
    pub per_forward_activated_prompt_tokens: usize,
}

pub fn count_trainable_params(config: &ModelConfig) -> ParamReport {
    let layers = config.prompt_layers.len();
    let mode = config.routing_mode;
    let routed = mode.routed_slots(config.n_router_experts, config.n_shared_experts);
    let shared = mode.shared_slots(config.n_shared_experts);
    let (m, d) = (config.prompt_len, config.hidden_dim);
    let prompt_params = layers * (routed + shared) * m * d;
    let router_params = layers * (d * routed + routed);
    let active = if mode.is_sparse() { 1 + shared } else { routed + shared };
    ParamReport {
        prompt_params,
        router_params,
        total: prompt_params + router_params,
        per_forward_activated_prompt_tokens: active * m,
    }
}
