use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mept_core::analysis::{self, cosine, mae};
use mept_core::runs::{self, read_dataset, RunConfig};
use mept_core::{AblationPlan, Error, GeneratorSpec, Model, Scheme};

#[derive(Parser)]
#[command(name = "mept", version, about = "Mixture-of-expert prompt tuning on a small transformer encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task datasets described by a spec file.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train under the separate or mixture scheme.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the scheme named in the config.
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation plan.
    Ablate {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analyze a trained checkpoint on a dataset's dev split.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        what: What,
        #[arg(long)]
        out: PathBuf,
        /// Hidden-state index for feature export (0 = embeddings); defaults to the last layer.
        #[arg(long)]
        layer: Option<usize>,
        /// Seed for the noisy routing modes.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Separate,
    Mixture,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Pathways,
    Utilization,
    Manifold,
    Features,
}

/// Exit status classes.
enum Failure {
    Usage(anyhow::Error),
    Numeric(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::NonFiniteLoss { .. }) => Failure::Numeric(e),
            Some(
                Error::Config(_)
                | Error::Json(_)
                | Error::Checkpoint(_)
                | Error::SequenceTooLong { .. }
                | Error::TokenOutOfRange { .. }
                | Error::LabelOutOfRange { .. }
                | Error::EmptyDataset(_),
            ) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

fn usage(msg: String) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg))
}

fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = read_input(path)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Thread cap from `MEPT_THREADS`, else the machine's parallelism.
fn thread_cap() -> Result<usize, Failure> {
    match std::env::var("MEPT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("MEPT_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn generate(spec: &Path, out: &Path, seed: u64) -> Result<(), Failure> {
    let spec: GeneratorSpec = parse_json(spec)?;
    spec.validate().map_err(anyhow::Error::from)?;
    let ds = mept_core::data::generate(&spec, seed).map_err(anyhow::Error::from)?;
    let manifest = runs::write_dataset(&ds, &spec, seed, out).map_err(anyhow::Error::from)?;
    log::info!("wrote {} tasks to {} (hash {})", manifest.tasks.len(), out.display(), manifest.dataset_hash);
    Ok(())
}

fn train(config: &Path, data: &Path, scheme: Option<SchemeArg>, out: &Path) -> Result<(), Failure> {
    let mut cfg: RunConfig = parse_json(config)?;
    if let Some(s) = scheme {
        cfg.train.scheme = match s {
            SchemeArg::Separate => Scheme::Separate,
            SchemeArg::Mixture => Scheme::Mixture,
        };
    }
    let (manifest, tasks) = read_dataset(data).map_err(anyhow::Error::from)?;
    let run = runs::train_run(&cfg, &tasks, &manifest.dataset_hash, out).map_err(anyhow::Error::from)?;
    for (task, acc) in &run.accuracy {
        log::info!("task {task}: dev accuracy {acc:.4}");
    }
    Ok(())
}

fn ablate(plan: &Path, data: &Path, out: &Path) -> Result<(), Failure> {
    let plan: AblationPlan = parse_json(plan)?;
    plan.cells().map_err(anyhow::Error::from)?;
    let threads = thread_cap()?;
    let (manifest, tasks) = read_dataset(data).map_err(anyhow::Error::from)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(
        &out.join("ablation_manifest.json"),
        &serde_json::json!({
            "version": runs::MANIFEST_VERSION,
            "plan": plan,
            "dataset_hash": manifest.dataset_hash,
            "code_revision": runs::code_revision(),
        }),
    )?;
    let report = mept_core::run_ablation(&plan, &tasks, threads).map_err(anyhow::Error::from)?;
    report.write(&out.join("ablation.csv"), &out.join("ablation_summary.json")).map_err(anyhow::Error::from)?;
    for c in &report.summary {
        log::info!("{}: {:.4} +- {:.4}", c.cell, c.mean, c.std);
    }
    Ok(())
}

#[derive(Serialize)]
struct TaskPathway {
    task_id: usize,
    family_id: usize,
    pathway: analysis::PathwayRecord,
}

#[derive(Serialize)]
struct PathwayPair {
    a: usize,
    b: usize,
    same_family: bool,
    mae: f64,
    cosine: f64,
}

fn analyze(ckpt: &Path, data: &Path, what: What, out: &Path, layer: Option<usize>, seed: u64) -> Result<(), Failure> {
    if !ckpt.exists() {
        return Err(usage(format!("{}: no such checkpoint", ckpt.display())));
    }
    let model = Model::load(ckpt).map_err(anyhow::Error::from)?;
    let (_, tasks) = read_dataset(data).map_err(anyhow::Error::from)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let version = analysis::ANALYSIS_VERSION;
    match what {
        What::Pathways => {
            let mut records = Vec::new();
            for t in &tasks {
                let pathway = analysis::extract_pathway(&model, &t.dev, seed).map_err(anyhow::Error::from)?;
                records.push(TaskPathway { task_id: t.spec.task_id, family_id: t.spec.family_id, pathway });
            }
            let mut pairs = Vec::new();
            for (i, x) in records.iter().enumerate() {
                for y in &records[i + 1..] {
                    let (vx, vy) = (x.pathway.vector(), y.pathway.vector());
                    pairs.push(PathwayPair {
                        a: x.task_id,
                        b: y.task_id,
                        same_family: x.family_id == y.family_id,
                        mae: mae(&vx, &vy).map_err(anyhow::Error::from)?,
                        cosine: cosine(&vx, &vy).map_err(anyhow::Error::from)?,
                    });
                }
            }
            write_json(
                &out.join("pathways.json"),
                &serde_json::json!({ "version": version, "tasks": records, "pairs": pairs }),
            )?;
        }
        What::Utilization => {
            let mut per_task = Vec::new();
            for t in &tasks {
                let table = analysis::expert_utilization(&model, &t.dev, seed).map_err(anyhow::Error::from)?;
                per_task.push(serde_json::json!({ "task_id": t.spec.task_id, "table": table }));
            }
            let all: Vec<_> = tasks.iter().flat_map(|t| t.dev.iter().cloned()).collect();
            let overall = analysis::expert_utilization(&model, &all, seed).map_err(anyhow::Error::from)?;
            write_json(
                &out.join("utilization.json"),
                &serde_json::json!({ "version": version, "overall": overall, "tasks": per_task }),
            )?;
        }
        What::Manifold => {
            let mut per_task = Vec::new();
            for t in &tasks {
                let report = analysis::manifold_metrics(&model, &t.dev, seed).map_err(anyhow::Error::from)?;
                per_task.push(serde_json::json!({ "task_id": t.spec.task_id, "report": report }));
            }
            write_json(&out.join("manifold.json"), &serde_json::json!({ "version": version, "tasks": per_task }))?;
        }
        What::Features => {
            let layer = layer.unwrap_or(model.config.n_layers);
            let all: Vec<_> = tasks.iter().flat_map(|t| t.dev.iter().cloned()).collect();
            let csv = analysis::export_features(&model, &all, layer, seed).map_err(anyhow::Error::from)?;
            fs::write(out.join("features.csv"), csv).context("writing features.csv")?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { spec, out, seed } => generate(&spec, &out, seed),
        Command::Train { config, data, scheme, out } => train(&config, &data, scheme, &out),
        Command::Ablate { plan, data, out } => ablate(&plan, &data, &out),
        Command::Analyze { ckpt, data, what, out, layer, seed } => analyze(&ckpt, &data, what, &out, layer, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(e)) => {
            eprintln!("numeric failure: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
