//! Read-only analysis of a trained model: routing pathways, expert
//! utilization, class-manifold geometry and pooled feature export.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Example};
use crate::error::{Error, Result};
use crate::model::{pool_features, ForwardTrace, Model};
use crate::prompt::argmax;
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

pub const ANALYSIS_VERSION: u32 = 1;
const BATCH: usize = 64;

/// Runs the model over `examples` in fixed-size batches, handing each trace
/// and its examples to `f`. Routing noise comes from `seed`.
fn for_each_trace(
    model: &Model,
    examples: &[Example],
    record: bool,
    seed: u64,
    mut f: impl FnMut(&ForwardTrace, &[Example]) -> Result<()>,
) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("analysis needs at least one example".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x616e_616c));
    for chunk in examples.chunks(BATCH) {
        let len = chunk.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let batch = Batch::from_examples(chunk, len);
        let trace = model.forward(&batch, record, &mut rng)?;
        f(&trace, chunk)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPathway {
    pub layer_index: usize,
    /// Mean routing distribution over the examples.
    pub mean_gate_probs: Vec<f64>,
    /// Argmax of `mean_gate_probs`, ties to the lowest index.
    pub expert: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayRecord {
    pub version: u32,
    pub n_examples: usize,
    pub layers: Vec<LayerPathway>,
}

impl PathwayRecord {
    /// Per-layer mean gate vectors concatenated in layer order.
    pub fn vector(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.mean_gate_probs.iter().copied()).collect()
    }

    pub fn experts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.expert).collect()
    }
}

pub fn extract_pathway(model: &Model, examples: &[Example], seed: u64) -> Result<PathwayRecord> {
    if model.prompts.is_empty() {
        return Err(Error::Analysis("model has no prompted layers".into()));
    }
    let mut sums: Vec<Vec<f64>> = model.prompts.iter().map(|p| vec![0.0; p.n_routed()]).collect();
    for_each_trace(model, examples, false, seed, |trace, _| {
        for (sum, layer) in sums.iter_mut().zip(&trace.pathway) {
            let probs = &layer.gate_probs;
            for r in 0..probs.shape()[0] {
                sum.iter_mut().zip(probs.row(r)).for_each(|(s, p)| *s += p);
            }
        }
        Ok(())
    })?;
    let n = examples.len() as f64;
    let layers = model
        .prompts
        .iter()
        .zip(sums)
        .map(|(p, sum)| {
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            LayerPathway { layer_index: p.layer_index, expert: argmax(&mean), mean_gate_probs: mean }
        })
        .collect();
    Ok(PathwayRecord { version: ANALYSIS_VERSION, n_examples: examples.len(), layers })
}

fn check_same_shape(x: &PathwayRecord, y: &PathwayRecord) -> Result<()> {
    let shape = |r: &PathwayRecord| r.layers.iter().map(|l| l.mean_gate_probs.len()).collect::<Vec<_>>();
    let (a, b) = (shape(x), shape(y));
    if a != b {
        return Err(Error::Shape { op: "pathway", lhs: a, rhs: b });
    }
    if a.is_empty() {
        return Err(Error::Analysis("empty pathway record".into()));
    }
    Ok(())
}

/// Mean absolute difference between two equal-length vectors.
pub fn mae(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape { op: "mae", lhs: vec![x.len()], rhs: vec![y.len()] });
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape { op: "cosine", lhs: vec![x.len()], rhs: vec![y.len()] });
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Analysis("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

pub fn pathway_mae(x: &PathwayRecord, y: &PathwayRecord) -> Result<f64> {
    check_same_shape(x, y)?;
    mae(&x.vector(), &y.vector())
}

pub fn pathway_cosine(x: &PathwayRecord, y: &PathwayRecord) -> Result<f64> {
    check_same_shape(x, y)?;
    cosine(&x.vector(), &y.vector())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationRow {
    pub layer_index: usize,
    /// Fraction of examples routed to each expert.
    pub frequencies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationTable {
    pub version: u32,
    pub n_examples: usize,
    pub layers: Vec<UtilizationRow>,
}

pub fn expert_utilization(model: &Model, examples: &[Example], seed: u64) -> Result<UtilizationTable> {
    if !model.config.routing_mode.is_sparse() {
        return Err(Error::Analysis(
            "dense routing activates every expert; use the mean gate probabilities of the pathway analysis".into(),
        ));
    }
    if model.prompts.is_empty() {
        return Err(Error::Analysis("model has no prompted layers".into()));
    }
    let mut counts: Vec<Vec<usize>> = model.prompts.iter().map(|p| vec![0; p.n_routed()]).collect();
    for_each_trace(model, examples, false, seed, |trace, _| {
        for (c, layer) in counts.iter_mut().zip(&trace.pathway) {
            layer.selected.iter().for_each(|&e| c[e] += 1);
        }
        Ok(())
    })?;
    let layers = model
        .prompts
        .iter()
        .zip(counts)
        .map(|(p, c)| {
            let total: usize = c.iter().sum();
            UtilizationRow {
                layer_index: p.layer_index,
                frequencies: c.iter().map(|&k| k as f64 / total as f64).collect(),
            }
        })
        .collect();
    Ok(UtilizationTable { version: ANALYSIS_VERSION, n_examples: examples.len(), layers })
}

/// Class geometry of one feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldStats {
    /// Mean distance over all pairs of examples sharing a label.
    pub within_class_mean_dist: f64,
    /// Mean distance over all pairs with different labels.
    pub between_class_mean_dist: f64,
    /// `within / between`, defined as 0 when both are 0.
    pub ratio: f64,
    /// Single-example classes, left out of the within-class mean.
    pub excluded_classes: Vec<usize>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Within/between-class distance statistics of `features` (`[n, d]`).
pub fn class_distances(features: &Tensor, labels: &[usize]) -> Result<ManifoldStats> {
    if features.rank() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::Shape { op: "class_distances", lhs: features.shape().to_vec(), rhs: vec![labels.len()] });
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Analysis("manifold metrics need at least two classes".into()));
    }
    let excluded_classes: Vec<usize> = by_class.iter().filter(|(_, v)| v.len() == 1).map(|(&c, _)| c).collect();
    for c in &excluded_classes {
        log::warn!("class {c} has a single example and is left out of the within-class distance");
    }
    let row = |i: usize| features.row(i);
    let (mut within, mut n_within) = (0.0, 0usize);
    for members in by_class.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                within += dist(row(i), row(j));
                n_within += 1;
            }
        }
    }
    if n_within == 0 {
        return Err(Error::Analysis("no class has two or more examples".into()));
    }
    let classes: Vec<&Vec<usize>> = by_class.values().collect();
    let (mut between, mut n_between) = (0.0, 0usize);
    for (a, ca) in classes.iter().enumerate() {
        for cb in &classes[a + 1..] {
            for &i in ca.iter() {
                for &j in cb.iter() {
                    between += dist(row(i), row(j));
                    n_between += 1;
                }
            }
        }
    }
    let within = within / n_within as f64;
    let between = between / n_between as f64;
    let ratio = if between == 0.0 { 0.0 } else { within / between };
    Ok(ManifoldStats { within_class_mean_dist: within, between_class_mean_dist: between, ratio, excluded_classes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerManifold {
    /// 0 is the embedding output, `n_layers` the final block.
    pub layer: usize,
    #[serde(flatten)]
    pub stats: ManifoldStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldReport {
    pub version: u32,
    pub n_examples: usize,
    pub layers: Vec<LayerManifold>,
}

impl ManifoldReport {
    pub fn final_layer(&self) -> &LayerManifold {
        self.layers.last().expect("at least one layer")
    }
}

/// Pooled text features at every layer (`0..=n_layers`), one `[n, d]`
/// tensor per layer, rows in example order.
pub fn pooled_features(model: &Model, examples: &[Example], seed: u64) -> Result<Vec<Tensor>> {
    let n_states = model.config.n_layers + 1;
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); n_states];
    for_each_trace(model, examples, true, seed, |trace, _| {
        for (l, out) in rows.iter_mut().enumerate() {
            out.extend_from_slice(pool_features(trace, l)?.data());
        }
        Ok(())
    })?;
    let d = model.config.hidden_dim;
    rows.into_iter().map(|r| Tensor::new(vec![examples.len(), d], r)).collect()
}

pub fn manifold_metrics(model: &Model, examples: &[Example], seed: u64) -> Result<ManifoldReport> {
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let features = pooled_features(model, examples, seed)?;
    let layers = features
        .iter()
        .enumerate()
        .map(|(layer, f)| Ok(LayerManifold { layer, stats: class_distances(f, &labels)? }))
        .collect::<Result<_>>()?;
    Ok(ManifoldReport { version: ANALYSIS_VERSION, n_examples: examples.len(), layers })
}

/// CSV with header `task,label,f0..f{d-1}` and one row per example.
pub fn export_features(model: &Model, examples: &[Example], layer: usize, seed: u64) -> Result<String> {
    if layer > model.config.n_layers {
        return Err(Error::Config(format!("layer {layer} outside 0..={}", model.config.n_layers)));
    }
    let features = pooled_features(model, examples, seed)?.swap_remove(layer);
    let d = model.config.hidden_dim;
    let mut out = String::from("task,label");
    for k in 0..d {
        write!(out, ",f{k}").expect("write to string");
    }
    out.push('\n');
    for (i, ex) in examples.iter().enumerate() {
        write!(out, "{},{}", ex.task, ex.label).expect("write to string");
        for v in features.row(i) {
            write!(out, ",{v}").expect("write to string");
        }
        out.push('\n');
    }
    Ok(out)
}
