//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. `MEPT_ACCEPTANCE=1,4,8` restricts the run to
//! the listed criteria.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use mept_core::analysis::{self, class_distances, mae};
use mept_core::data::{generate, make_mixture, Example, TaskSpec};
use mept_core::runs::{train_run, RunConfig, ACCURACY_CSV};
use mept_core::train::run_scheme;
use mept_core::{
    count_trainable_params, variant_configs, Batch, GeneratorSpec, Graph, Model, ModelConfig, ParamGroup, RoutingMode,
    TaskDataset, Tensor, TrainConfig, TrainingSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: u32, len: std::ops::RangeInclusive<usize>) -> Vec<u32> {
    let n = rng.random_range(len);
    (0..n).map(|_| rng.random_range(1..vocab)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        max_seq_len: 32,
        n_router_experts: 1,
        n_shared_experts: 0,
        routing_mode: RoutingMode::Top1,
        seed: 11,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg).unwrap();
    let prompts: BTreeMap<usize, common::Mat> =
        model.prompts.iter().map(|p| (p.layer_index, common::slab(&p.router_experts, 0))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let examples: Vec<Example> =
        (0..8).map(|_| Example { tokens: random_tokens(&mut rng, 256, 4..=32), label: 0, task: 0 }).collect();
    let trace = model.forward(&Batch::from_examples(&examples, 32), false, &mut rng).unwrap();
    let mut worst: f64 = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        worst = worst.max(max_diff(trace.logits.row(i), &common::deep_prompt_logits(&model, &ex.tokens, &prompts)));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-12 && secs < 1.0, format!("max |diff| {worst:.2e} over 8 padded examples, {secs:.2}s"))
}

/// Reads entry `k` of the `pi`-th parameter, optionally overwriting it first.
fn entry(model: &mut Model, pi: usize, k: usize, value: Option<f64>) -> f64 {
    let (mut idx, mut out) = (0, 0.0);
    model.visit_mut(&mut |_, _, t: &mut Tensor| {
        if idx == pi {
            if let Some(v) = value {
                t.data_mut()[k] = v;
            }
            out = t.data()[k];
        }
        idx += 1;
    });
    out
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut model = Model::new(ModelConfig {
        n_layers: 2,
        hidden_dim: 16,
        n_heads: 2,
        ffn_mult: 2,
        vocab_size: 12,
        max_seq_len: 6,
        n_classes: 3,
        prompt_len: 2,
        n_router_experts: 2,
        n_shared_experts: 1,
        prompt_layers: [1, 2].into(),
        seed: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    model.set_trainable(|_| true);
    let exs = [
        Example { tokens: vec![1, 2, 3, 4, 5, 6], label: 2, task: 0 },
        Example { tokens: vec![7, 8], label: 0, task: 0 },
        Example { tokens: vec![9, 10, 11], label: 1, task: 0 },
    ];
    let batch = Batch::from_examples(&exs, 6);
    let loss = |m: &Model| {
        let mut g = Graph::new();
        let (l, _) = m.loss_on(&mut g, &batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let (l, _) = model.loss_on(&mut g, &batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    g.backward(l).unwrap();
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    model.visit(&mut |_, _, t| analytic.push(g.param_grad(t).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.numel()])));

    let step = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for (pi, grad) in analytic.iter().enumerate() {
        for (k, &a) in grad.iter().enumerate() {
            let original = entry(&mut model, pi, k, None);
            entry(&mut model, pi, k, Some(original + step));
            let up = loss(&model);
            entry(&mut model, pi, k, Some(original - step));
            let down = loss(&model);
            entry(&mut model, pi, k, Some(original));
            let fd = (up - down) / (2.0 * step);
            worst = worst.max((a - fd).abs() / 1f64.max(a.abs()).max(fd.abs()));
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 60.0,
        format!("worst relative error {worst:.2e} over {checked} parameters, {secs:.1}s"),
    )
}

fn criterion_3() -> Outcome {
    let mut violations = 0;
    for seed in 0..100u64 {
        let mut model = Model::new(ModelConfig { max_seq_len: 32, seed, ..ModelConfig::default() }).unwrap();
        model.set_trainable(|g| g != ParamGroup::Backbone);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ex = Example { tokens: random_tokens(&mut rng, 256, 4..=32), label: rng.random_range(0..3), task: 0 };
        let mut g = Graph::new();
        let (loss, fwd) = model.loss_on(&mut g, &Batch::from_examples([&ex], 32), &mut rng).unwrap();
        g.backward(loss).unwrap();
        for (p, route) in model.prompts.iter().zip(&fwd.routing) {
            let (n, slab) = (p.n_routed(), p.prompt_len() * p.dim());
            let grad = g.param_grad(&p.router_experts).unwrap();
            let live: Vec<usize> =
                (0..n).filter(|&e| grad[e * slab..(e + 1) * slab].iter().any(|&v| v != 0.0)).collect();
            let shared = g.param_grad(p.shared_experts.as_ref().unwrap()).unwrap();
            let shared_live = (0..p.n_shared()).all(|s| shared[s * slab..(s + 1) * slab].iter().any(|&v| v != 0.0));
            if live != [route.selected[0]] || !shared_live {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("{violations} violations over 100 seeds x 4 prompted layers"))
}

fn criterion_4() -> Outcome {
    let activated: Vec<usize> = [4, 10, 20]
        .iter()
        .map(|&n_r| {
            count_trainable_params(&ModelConfig { n_router_experts: n_r, ..ModelConfig::default() })
                .per_forward_activated_prompt_tokens
        })
        .collect();
    let big = count_trainable_params(&ModelConfig {
        n_layers: 12,
        hidden_dim: 768,
        n_heads: 12,
        prompt_len: 10,
        n_router_experts: 10,
        n_shared_experts: 1,
        prompt_layers: (1..=12).collect(),
        ..ModelConfig::default()
    });
    let pass =
        activated.windows(2).all(|w| w[0] == w[1]) && big.prompt_params == 1_013_760 && big.router_params == 92_280;
    outcome(
        pass,
        format!(
            "activated tokens {activated:?} for N_r 4/10/20; prompt {} router {}",
            big.prompt_params, big.router_params
        ),
    )
}

type TrainedCheck = fn(&MixtureRuns) -> Outcome;

/// Trained mixture runs shared by criteria 5-7.
struct MixtureRuns {
    tasks: Vec<TaskDataset>,
    mept: Vec<(ModelConfig, Model, f64)>,
    baseline: Vec<f64>,
    secs: f64,
}

fn mixture_model(seed: u64, n_r: usize, n_s: usize) -> ModelConfig {
    ModelConfig { max_seq_len: 32, n_router_experts: n_r, n_shared_experts: n_s, seed, ..ModelConfig::default() }
}

fn mixture_train(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 4, learning_rate: 3e-3, seed, ..TrainConfig::default() }
}

fn mixture_runs() -> MixtureRuns {
    let start = Instant::now();
    let tasks = generate(&GeneratorSpec::default(), 0).unwrap().tasks;
    let (mut mept, mut baseline) = (Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let cfg = mixture_model(seed, 4, 1);
        let mut run = run_scheme(&cfg, &mixture_train(seed), &tasks).unwrap();
        let acc = run[0].log.final_eval().unwrap().mean;
        mept.push((cfg, run.remove(0).model, acc));
        let base = run_scheme(&mixture_model(seed, 1, 0), &mixture_train(seed), &tasks).unwrap();
        baseline.push(base[0].log.final_eval().unwrap().mean);
    }
    MixtureRuns { tasks, mept, baseline, secs: start.elapsed().as_secs_f64() }
}

fn criterion_5(runs: &MixtureRuns) -> Outcome {
    let n = SEEDS as f64;
    let mept = runs.mept.iter().map(|r| r.2).sum::<f64>() / n;
    let base = runs.baseline.iter().sum::<f64>() / n;
    let per_seed: Vec<String> =
        runs.mept.iter().zip(&runs.baseline).map(|(m, b)| format!("{:.3}/{:.3}", m.2, b)).collect();
    outcome(
        mept >= base && runs.secs < 15.0 * 60.0,
        format!(
            "mean dev accuracy MEPT {mept:.4} vs single prompt {base:.4} (per seed {}), {:.0}s",
            per_seed.join(" "),
            runs.secs
        ),
    )
}

fn criterion_6(runs: &MixtureRuns) -> Outcome {
    let mut wins = 0;
    let mut details = Vec::new();
    for (_, model, _) in &runs.mept {
        let paths: Vec<(usize, Vec<f64>)> = runs
            .tasks
            .iter()
            .map(|t| (t.spec.family_id, analysis::extract_pathway(model, &t.dev, 0).unwrap().vector()))
            .collect();
        let (mut within, mut across) = (Vec::new(), Vec::new());
        for (i, (fa, a)) in paths.iter().enumerate() {
            for (fb, b) in &paths[i + 1..] {
                let c = analysis::cosine(a, b).unwrap();
                if fa == fb {
                    within.push(c);
                } else {
                    across.push(c);
                }
            }
        }
        let w = within.iter().sum::<f64>() / within.len() as f64;
        let x = across.iter().sum::<f64>() / across.len() as f64;
        if w > x {
            wins += 1;
        }
        details.push(format!("{w:.4}/{x:.4}"));
    }
    outcome(wins >= 4, format!("within > across family cosine in {wins}/5 seeds ({})", details.join(" ")))
}

/// Mean over tasks of the final-layer within/between distance ratio on dev.
fn final_layer_ratio(model: &Model, tasks: &[TaskDataset]) -> f64 {
    let ratios: Vec<f64> =
        tasks.iter().map(|t| analysis::manifold_metrics(model, &t.dev, 0).unwrap().final_layer().stats.ratio).collect();
    ratios.iter().sum::<f64>() / ratios.len() as f64
}

fn criterion_7(runs: &MixtureRuns) -> Outcome {
    let mut ok = 0;
    let mut details = Vec::new();
    for (cfg, model, _) in &runs.mept {
        let init = Model::new(cfg.clone()).unwrap();
        let (before, after) = (final_layer_ratio(&init, &runs.tasks), final_layer_ratio(model, &runs.tasks));
        if after < before {
            ok += 1;
        }
        details.push(format!("{before:.4}->{after:.4}"));
    }
    outcome(ok == SEEDS as usize, format!("ratio fell in {ok}/5 seeds ({})", details.join(" ")))
}

fn brute_ratio(feats: &[Vec<f64>], labels: &[usize]) -> (f64, f64) {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let count = |c: usize| labels.iter().filter(|&&l| l == c).count();
    let (mut w, mut nw, mut b, mut nb) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..feats.len() {
        for j in 0..feats.len() {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                if count(labels[i]) > 1 {
                    w += dist(&feats[i], &feats[j]);
                    nw += 1.0;
                }
            } else {
                b += dist(&feats[i], &feats[j]);
                nb += 1.0;
            }
        }
    }
    (w / nw, b / nb)
}

fn criterion_8() -> Outcome {
    let (mut worst_mae, mut worst_manifold, mut worst_util): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for i in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let n_layers = rng.random_range(1..=3);
        let mut layers: std::collections::BTreeSet<usize> = (1..=n_layers).filter(|_| rng.random_bool(0.6)).collect();
        layers.insert(rng.random_range(1..=n_layers));
        let model = Model::new(ModelConfig {
            n_layers,
            hidden_dim: 8,
            n_heads: 2,
            ffn_mult: 2,
            vocab_size: 30,
            max_seq_len: 12,
            n_classes: 3,
            prompt_len: rng.random_range(1..=3),
            n_router_experts: rng.random_range(1..=4),
            n_shared_experts: rng.random_range(0..=1),
            prompt_layers: layers,
            seed: i,
            ..ModelConfig::default()
        })
        .unwrap();
        let n_classes = rng.random_range(2..=3);
        let mut draw = |n: usize| -> Vec<Example> {
            (0..n)
                .map(|k| Example { tokens: random_tokens(&mut rng, 30, 1..=12), label: k % n_classes, task: 0 })
                .collect()
        };
        let (a, b) = (draw(7), draw(11));

        // Pathways from reference gates.
        let ref_vector = |exs: &[Example]| -> Vec<f64> {
            let traces: Vec<common::RefTrace> = exs.iter().map(|e| common::mept_trace(&model, &e.tokens)).collect();
            let mut v = Vec::new();
            for l in model.config.prompt_layers.iter() {
                let n = traces[0].gates[l].len();
                for e in 0..n {
                    v.push(traces.iter().map(|t| t.gates[l][e]).sum::<f64>() / traces.len() as f64);
                }
            }
            v
        };
        let (pa, pb) =
            (analysis::extract_pathway(&model, &a, 0).unwrap(), analysis::extract_pathway(&model, &b, 0).unwrap());
        let (ra, rb) = (ref_vector(&a), ref_vector(&b));
        let brute = ra.iter().zip(&rb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ra.len() as f64;
        worst_mae = worst_mae.max((analysis::pathway_mae(&pa, &pb).unwrap() - brute).abs());
        worst_mae = worst_mae.max((mae(&pa.vector(), &ra).unwrap()).abs());

        // Manifold metrics from reference pooled features, every layer.
        let report = analysis::manifold_metrics(&model, &b, 0).unwrap();
        let traces: Vec<common::RefTrace> = b.iter().map(|e| common::mept_trace(&model, &e.tokens)).collect();
        let labels: Vec<usize> = b.iter().map(|e| e.label).collect();
        for lm in &report.layers {
            let feats: Vec<Vec<f64>> = traces.iter().map(|t| t.pooled[lm.layer].clone()).collect();
            let (w, btw) = brute_ratio(&feats, &labels);
            let stats = &lm.stats;
            for (got, want) in
                [(stats.within_class_mean_dist, w), (stats.between_class_mean_dist, btw), (stats.ratio, w / btw)]
            {
                worst_manifold = worst_manifold.max((got - want).abs());
            }
            let direct = class_distances(&Tensor::from_rows(&feats).unwrap(), &labels).unwrap();
            worst_manifold = worst_manifold.max((direct.ratio - w / btw).abs());
        }

        let util = analysis::expert_utilization(&model, &b, 0).unwrap();
        for row in &util.layers {
            worst_util = worst_util.max((row.frequencies.iter().sum::<f64>() - 1.0).abs());
        }
    }
    outcome(
        worst_mae <= 1e-9 && worst_manifold <= 1e-9 && worst_util <= 1e-9,
        format!(
            "50 instances: pathway error {worst_mae:.1e}, manifold error {worst_manifold:.1e}, utilization row error {worst_util:.1e}"
        ),
    )
}

fn tiny_task() -> TrainingSet {
    let spec = GeneratorSpec {
        vocab_size: 64,
        seq_len: 10,
        min_len: 8,
        n_train: 200,
        n_dev: 40,
        motif_pool: 4,
        family_pool: 10,
        task_pool: 4,
        tasks: vec![TaskSpec { task_id: 0, family_id: 0, n_classes: 2 }],
        ..GeneratorSpec::default()
    };
    TrainingSet::single(&generate(&spec, 9).unwrap().tasks[0])
}

fn tiny_model(mode: RoutingMode) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden_dim: 16,
        n_heads: 2,
        ffn_mult: 2,
        vocab_size: 64,
        max_seq_len: 16,
        n_classes: 2,
        prompt_len: 2,
        n_router_experts: 3,
        n_shared_experts: 1,
        prompt_layers: [1, 2].into(),
        routing_mode: mode,
        seed: 4,
        ..ModelConfig::default()
    }
}

fn criterion_9() -> Outcome {
    let data = tiny_task();
    let tcfg = TrainConfig { epochs: 1, batch_size: 4, learning_rate: 1e-2, seed: 4, ..TrainConfig::default() };
    let run = |mode: RoutingMode| {
        let mut model = Model::new(tiny_model(mode)).unwrap();
        let log = mept_core::train(&mut model, &data, &tcfg, None);
        (model, log)
    };
    let mut failures = Vec::new();
    for mode in variant_configs() {
        let (model, log) = run(mode);
        match log {
            Ok(log)
                if log.steps.len() == 50
                    && log.steps.iter().all(|s| s.loss.is_finite())
                    && model.prompts.iter().all(|p| p.is_finite()) => {}
            Ok(log) => failures.push(format!("{}: {} steps", mode.name(), log.steps.len())),
            Err(e) => failures.push(format!("{}: {e}", mode.name())),
        }
    }
    let mut nondeterministic = Vec::new();
    for mode in [RoutingMode::GumbelSoftmax { temperature: 1.0 }, RoutingMode::Perturbation { sigma: 1.0 }] {
        let (m1, l1) = run(mode);
        let (m2, l2) = run(mode);
        if m1.param_hash() != m2.param_hash() || l1.unwrap() != l2.unwrap() {
            nondeterministic.push(mode.name());
        }
    }
    outcome(
        failures.is_empty() && nondeterministic.is_empty(),
        format!("7 variants x 50 steps, failures {failures:?}, nondeterministic {nondeterministic:?}"),
    )
}

fn criterion_10() -> Outcome {
    let spec = GeneratorSpec {
        vocab_size: 64,
        seq_len: 10,
        min_len: 8,
        n_train: 64,
        n_dev: 32,
        motif_pool: 6,
        family_pool: 10,
        task_pool: 4,
        tasks: vec![
            TaskSpec { task_id: 0, family_id: 0, n_classes: 2 },
            TaskSpec { task_id: 1, family_id: 1, n_classes: 2 },
        ],
        ..GeneratorSpec::default()
    };
    let tasks = generate(&spec, 5).unwrap().tasks;
    let hash = make_mixture(&tasks, 0).unwrap().content_hash();
    let cfg = RunConfig {
        model: tiny_model(RoutingMode::Top1),
        train: TrainConfig { epochs: 2, batch_size: 8, learning_rate: 1e-2, ..TrainConfig::default() },
    };
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| {
        let out = dir.path().join(name);
        train_run(&cfg, &tasks, &hash, &out).unwrap();
        std::fs::read(out.join(ACCURACY_CSV)).unwrap()
    };
    let (a, b) = (read("first"), read("second"));
    outcome(
        a == b && !a.is_empty(),
        format!("accuracy CSVs {} ({} bytes)", if a == b { "identical" } else { "differ" }, a.len()),
    )
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("MEPT_ACCEPTANCE").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let guarded = |f: &dyn Fn() -> Outcome| {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        })
    };

    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let simple: [(usize, fn() -> Outcome); 7] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    for (n, f) in simple {
        if wanted(n) {
            results.push((n, guarded(&f)));
        }
    }
    if wanted(5) || wanted(6) || wanted(7) {
        match catch_unwind(mixture_runs) {
            Ok(runs) => {
                let trained: [(usize, TrainedCheck); 3] = [(5, criterion_5), (6, criterion_6), (7, criterion_7)];
                for (n, f) in trained {
                    if wanted(n) {
                        results.push((n, guarded(&|| f(&runs))));
                    }
                }
            }
            Err(_) => {
                for n in [5, 6, 7].into_iter().filter(|&n| wanted(n)) {
                    results.push((n, outcome(false, "mixture training panicked".into())));
                }
            }
        }
    }
    results.sort_by_key(|r| r.0);
    for (n, o) in &results {
        println!("criterion {n:>2}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|r| !r.1.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
