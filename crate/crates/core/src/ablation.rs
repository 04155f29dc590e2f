//! Ablation plans: routing variants, prompt depth, learning space and the
//! prompt-length by expert-count grid.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::prompt::RoutingMode;
use crate::train::{run_scheme, LearningSpace, TrainConfig};

pub const REPORT_VERSION: u32 = 1;

/// The swept axis and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum AblationAxis {
    RoutingMode(Vec<RoutingMode>),
    /// Each value is a set of 1-based prompted layers.
    DepthSet(Vec<BTreeSet<usize>>),
    LearningSpace(Vec<LearningSpace>),
    LengthExpertGrid {
        prompt_lens: Vec<usize>,
        n_router_experts: Vec<usize>,
    },
}

fn default_seeds() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub base_config: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub axis: AblationAxis,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
}

/// One configuration of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn layer_label(layers: &BTreeSet<usize>) -> String {
    let v: Vec<usize> = layers.iter().copied().collect();
    let contiguous = v.windows(2).all(|w| w[1] == w[0] + 1);
    match v.as_slice() {
        [] => "layers=none".into(),
        [one] => format!("layers={one}"),
        [first, .., last] if contiguous => format!("layers={first}-{last}"),
        _ => format!("layers={}", v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")),
    }
}

impl AblationPlan {
    /// Expands the plan into validated cells, in value order.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be >= 1".into()));
        }
        let base = &self.base_config;
        let with = |id: String, model: ModelConfig, train: TrainConfig| Cell { id, model, train };
        let cells: Vec<Cell> = match &self.axis {
            AblationAxis::RoutingMode(modes) => modes
                .iter()
                .map(|&m| with(m.name(), ModelConfig { routing_mode: m, ..base.clone() }, self.train.clone()))
                .collect(),
            AblationAxis::DepthSet(sets) => sets
                .iter()
                .map(|s| {
                    with(layer_label(s), ModelConfig { prompt_layers: s.clone(), ..base.clone() }, self.train.clone())
                })
                .collect(),
            AblationAxis::LearningSpace(spaces) => spaces
                .iter()
                .map(|&ls| {
                    let id = format!("router={},prompts={}", ls.train_router, ls.train_prompts);
                    with(id, base.clone(), TrainConfig { learning_space: ls, ..self.train.clone() })
                })
                .collect(),
            AblationAxis::LengthExpertGrid { prompt_lens, n_router_experts } => {
                if prompt_lens.is_empty() || n_router_experts.is_empty() {
                    return Err(Error::Config("grid axes must both be non-empty".into()));
                }
                prompt_lens
                    .iter()
                    .flat_map(|&m| n_router_experts.iter().map(move |&n| (m, n)))
                    .map(|(m, n)| {
                        let cfg = ModelConfig { prompt_len: m, n_router_experts: n, ..base.clone() };
                        with(format!("m={m},n_r={n}"), cfg, self.train.clone())
                    })
                    .collect()
            }
        };
        if cells.is_empty() {
            return Err(Error::Config("ablation values must be non-empty".into()));
        }
        for c in &cells {
            if let AblationAxis::DepthSet(_) = self.axis {
                if c.model.prompt_layers.is_empty() {
                    return Err(Error::Config("depth set must name at least one layer".into()));
                }
            }
            c.model.validate().map_err(|e| Error::Config(format!("cell {}: {e}", c.id)))?;
            c.train.validate().map_err(|e| Error::Config(format!("cell {}: {e}", c.id)))?;
        }
        Ok(cells)
    }
}

/// Table-3 router variants: the default Top-1 router and six alternatives.
pub fn variant_configs() -> Vec<RoutingMode> {
    vec![
        RoutingMode::Top1,
        RoutingMode::Stochastic,
        RoutingMode::Dense,
        RoutingMode::GumbelSoftmax { temperature: 1.0 },
        RoutingMode::Perturbation { sigma: 1.0 },
        RoutingMode::NoShared,
        RoutingMode::ReplaceShared,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub cell: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: u32,
    pub runs: Vec<CellRun>,
    pub summary: Vec<CellSummary>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell,seed,accuracy\n");
        for r in &self.runs {
            s.push_str(&format!("{},{},{}\n", csv_field(&r.cell), r.seed, r.accuracy));
        }
        s
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv())?;
        let summary = serde_json::json!({ "version": self.version, "cells": self.summary });
        fs::write(json_path, serde_json::to_string_pretty(&summary)? + "\n")?;
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Accuracy of one cell at one seed: the unweighted mean of final dev
/// accuracy over every task, whatever the training scheme.
pub fn run_cell(cell: &Cell, replicate: usize, tasks: &[TaskDataset]) -> Result<CellRun> {
    let model = ModelConfig { seed: cell.model.seed + replicate as u64, ..cell.model.clone() };
    let train = TrainConfig { seed: cell.train.seed + replicate as u64, ..cell.train.clone() };
    let runs = run_scheme(&model, &train, tasks)?;
    let mut accs = Vec::new();
    for r in &runs {
        let eval = r.log.final_eval().ok_or_else(|| Error::EmptyDataset("no dev evaluation".into()))?;
        accs.extend(eval.per_task.values().copied());
    }
    Ok(CellRun { cell: cell.id.clone(), seed: model.seed, accuracy: accs.iter().sum::<f64>() / accs.len() as f64 })
}

/// Trains every (cell, seed) pair from its seeded initialization. Replicate
/// `k` offsets both the model and the training seed by `k`. Up to `threads`
/// pairs run concurrently; results do not depend on the thread count.
pub fn run_ablation(plan: &AblationPlan, tasks: &[TaskDataset], threads: usize) -> Result<AblationReport> {
    let cells = plan.cells()?;
    let vocab = tasks.iter().map(|t| t.vocab_size).max().unwrap_or(0);
    if vocab > plan.base_config.vocab_size {
        return Err(Error::Config(format!(
            "dataset vocabulary {vocab} exceeds model vocab_size {}",
            plan.base_config.vocab_size
        )));
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..plan.n_seeds).map(move |s| (c, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let runs: Vec<CellRun> =
        pool.install(|| jobs.par_iter().map(|&(c, s)| run_cell(&cells[c], s, tasks)).collect::<Result<_>>())?;
    let summary = cells
        .iter()
        .map(|c| {
            let accs: Vec<f64> = runs.iter().filter(|r| r.cell == c.id).map(|r| r.accuracy).collect();
            let (mean, std) = mean_std(&accs);
            CellSummary { cell: c.id.clone(), mean, std, n_seeds: accs.len() }
        })
        .collect();
    Ok(AblationReport { version: REPORT_VERSION, runs, summary })
}
