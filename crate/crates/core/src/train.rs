//! Optimization loop, evaluation and the separate/mixture training schemes.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{make_mixture, Batch, Example, TaskDataset, TrainingSet};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamGroup};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// One model per task.
    Separate,
    /// One model on the union of all tasks.
    #[default]
    Mixture,
}

/// Which MEPT components receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningSpace {
    pub train_router: bool,
    pub train_prompts: bool,
}

impl Default for LearningSpace {
    fn default() -> Self {
        Self { train_router: true, train_prompts: true }
    }
}

impl LearningSpace {
    pub fn validate(&self) -> Result<()> {
        if !self.train_router && !self.train_prompts {
            return Err(Error::Config("learning space must train the router, the prompts, or both".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub scheme: Scheme,
    /// Global gradient-norm cap.
    pub grad_clip: Option<f64>,
    /// Evaluate every this many steps; 0 evaluates only at the end of each epoch.
    pub eval_every: usize,
    pub seed: u64,
    pub learning_space: LearningSpace,
    pub train_backbone: bool,
    pub train_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            scheme: Scheme::Mixture,
            grad_clip: None,
            eval_every: 0,
            seed: 0,
            learning_space: LearningSpace::default(),
            train_backbone: false,
            train_head: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        if self.epochs == 0 {
            return fail("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return fail("grad_clip must be positive");
            }
        }
        self.learning_space.validate()
    }

    pub fn trainable(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Backbone => self.train_backbone,
            ParamGroup::Head => self.train_head,
            ParamGroup::Prompt => self.learning_space.train_prompts,
            ParamGroup::Router => self.learning_space.train_router,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Dev accuracy per task and its unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: BTreeMap<usize, f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Step(StepRecord),
    Eval(EvalRecord),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub checkpoint: Option<String>,
}

impl TrainLog {
    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.evals.last().map(|e| &e.report)
    }
}

/// Per-parameter optimizer state, kept in [`Model::visit`] order.
struct OptState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Update count per slab for bias correction; one slab per leading index
    /// for prompt tensors, one for everything else.
    t: Vec<Vec<u64>>,
}

impl OptState {
    fn new(model: &Model) -> Self {
        let mut s = OptState { m: vec![], v: vec![], t: vec![] };
        model.visit(&mut |_, group, p| {
            s.m.push(vec![0.0; p.numel()]);
            s.v.push(vec![0.0; p.numel()]);
            s.t.push(vec![0; slab_count(group, p.shape())]);
        });
        s
    }
}

fn slab_count(group: ParamGroup, shape: &[usize]) -> usize {
    if group == ParamGroup::Prompt {
        shape[0]
    } else {
        1
    }
}

/// Applies one update. Prompt-expert slabs whose gradient is exactly zero (not
/// selected by the router anywhere in the batch) are left untouched, moments
/// included.
fn apply_update(model: &mut Model, state: &mut OptState, tcfg: &TrainConfig, scale: f64) {
    let lr = tcfg.learning_rate;
    let mut idx = 0;
    model.visit_mut(&mut |_, group, p| {
        let i = idx;
        idx += 1;
        let Some(grad) = p.grad().map(<[f64]>::to_vec) else { return };
        let slabs = slab_count(group, p.shape());
        let slab = p.numel() / slabs;
        for s in 0..slabs {
            let range = s * slab..(s + 1) * slab;
            let g = &grad[range.clone()];
            if slabs > 1 && g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let w = &mut p.data_mut()[range.clone()];
            match tcfg.optimizer {
                Optimizer::Sgd => w.iter_mut().zip(g).for_each(|(w, g)| *w -= lr * scale * g),
                Optimizer::Adam { beta1, beta2, eps } => {
                    state.t[i][s] += 1;
                    let t = state.t[i][s] as i32;
                    let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    let m = &mut state.m[i][range.clone()];
                    let v = &mut state.v[i][range];
                    for k in 0..slab {
                        let gk = g[k] * scale;
                        m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                        w[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                    }
                }
            }
        }
    });
}

fn grad_norm(model: &Model) -> f64 {
    let mut sq = 0.0;
    model.visit(&mut |_, _, p| {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    });
    sq.sqrt()
}

fn check_data(model: &Model, data: &TrainingSet) -> Result<()> {
    let cfg = &model.config;
    if data.vocab_size > cfg.vocab_size {
        return Err(Error::Config(format!(
            "dataset vocabulary {} exceeds model vocab_size {}",
            data.vocab_size, cfg.vocab_size
        )));
    }
    if data.seq_len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: data.seq_len, max: cfg.max_seq_len });
    }
    if data.n_classes > cfg.n_classes {
        return Err(Error::Config(format!("dataset has {} classes, model head has {}", data.n_classes, cfg.n_classes)));
    }
    if data.train.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    Ok(())
}

/// Accuracy per task plus the unweighted mean over tasks. The routing RNG is
/// reseeded from `seed` so evaluation is repeatable for the noisy modes.
pub fn evaluate(
    model: &Model,
    dev: &BTreeMap<usize, Vec<Example>>,
    seq_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<EvalReport> {
    if dev.is_empty() {
        return Err(Error::EmptyDataset("no dev sets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6576_616c));
    let mut per_task = BTreeMap::new();
    for (&task, examples) in dev {
        if examples.is_empty() {
            return Err(Error::EmptyDataset(format!("dev set of task {task} is empty")));
        }
        let mut correct = 0usize;
        for chunk in examples.chunks(batch_size.max(1)) {
            let batch = Batch::from_examples(chunk, seq_len);
            let pred = model.predict(&batch, &mut rng)?;
            correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        }
        per_task.insert(task, correct as f64 / examples.len() as f64);
    }
    let mean = mean_accuracy(&per_task);
    Ok(EvalReport { per_task, mean })
}

pub fn mean_accuracy(per_task: &BTreeMap<usize, f64>) -> f64 {
    per_task.values().sum::<f64>() / per_task.len() as f64
}

/// One optimizer step on `batch`; returns the loss.
pub fn train_step(
    model: &mut Model,
    batch: &Batch,
    tcfg: &TrainConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut state = OptState::new(model);
    step_with_state(model, &mut state, batch, tcfg, step, rng)
}

fn step_with_state(
    model: &mut Model,
    state: &mut OptState,
    batch: &Batch,
    tcfg: &TrainConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let (loss_var, _) = model.loss_on(&mut g, batch, rng)?;
    let loss = g.value(loss_var).item();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step, lr: tcfg.learning_rate });
    }
    g.backward(loss_var)?;
    model.zero_grad();
    model.collect_grads(&g);
    let norm = grad_norm(model);
    if !norm.is_finite() {
        return Err(Error::NonFiniteLoss { step, lr: tcfg.learning_rate });
    }
    let scale = match tcfg.grad_clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    apply_update(model, state, tcfg, scale);
    model.zero_grad();
    Ok(loss)
}

/// Trains `model` in place on `data.train`, evaluating on `data.dev`. Each
/// event is also written to `sink` as one JSON line when given.
pub fn train(
    model: &mut Model,
    data: &TrainingSet,
    tcfg: &TrainConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainLog> {
    tcfg.validate()?;
    check_data(model, data)?;
    model.set_trainable(|g| tcfg.trainable(g));
    let mut state = OptState::new(model);
    let mut route_rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, 0x726f_7574));
    let mut log = TrainLog::default();
    let mut emit = |log: &mut TrainLog, ev: LogEvent| -> Result<()> {
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &ev)?;
            w.write_all(b"\n")?;
        }
        match ev {
            LogEvent::Step(s) => log.steps.push(s),
            LogEvent::Eval(e) => log.evals.push(e),
        }
        Ok(())
    };
    let eval = |model: &Model| evaluate(model, &data.dev, data.seq_len, tcfg.batch_size, tcfg.seed);

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0;
    for epoch in 0..tcfg.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, 0x5348_0000 + epoch as u64));
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(tcfg.batch_size) {
            let batch = Batch::from_examples(chunk.iter().map(|&i| &data.train[i]), data.seq_len);
            let loss = step_with_state(model, &mut state, &batch, tcfg, step, &mut route_rng)?;
            step += 1;
            emit(&mut log, LogEvent::Step(StepRecord { step, epoch, loss }))?;
            if tcfg.eval_every > 0 && step % tcfg.eval_every == 0 && !data.dev.is_empty() {
                let report = eval(model)?;
                emit(&mut log, LogEvent::Eval(EvalRecord { step, epoch, report }))?;
            }
        }
        let evaluated_now = tcfg.eval_every > 0 && step % tcfg.eval_every == 0;
        if !data.dev.is_empty() && (tcfg.eval_every == 0 || (epoch + 1 == tcfg.epochs && !evaluated_now)) {
            let report = eval(model)?;
            emit(&mut log, LogEvent::Eval(EvalRecord { step, epoch, report }))?;
        }
    }
    Ok(log)
}

/// A trained model together with the tasks it covers.
#[derive(Debug, Clone)]
pub struct SchemeRun {
    pub tasks: Vec<usize>,
    pub model: Model,
    pub log: TrainLog,
}

/// Trains under `tcfg.scheme`: one model on the shuffled union of `tasks`
/// (mixture) or one fresh model per task (separate). Every model starts from
/// `config`'s seeded initialization.
pub fn run_scheme(config: &ModelConfig, tcfg: &TrainConfig, tasks: &[TaskDataset]) -> Result<Vec<SchemeRun>> {
    let sets: Vec<TrainingSet> = match tcfg.scheme {
        Scheme::Mixture => vec![make_mixture(tasks, tcfg.seed)?],
        Scheme::Separate => {
            if tasks.is_empty() {
                return Err(Error::EmptyDataset("no task datasets".into()));
            }
            tasks.iter().map(TrainingSet::single).collect()
        }
    };
    sets.into_iter()
        .map(|set| {
            let mut model = Model::new(config.clone())?;
            let log = train(&mut model, &set, tcfg, None)?;
            Ok(SchemeRun { tasks: set.task_ids(), model, log })
        })
        .collect()
}
