//! On-disk layout of datasets and training runs.
//!
//! A dataset directory holds one `task_<id>.jsonl` file per task plus
//! `manifest.json`. A training run directory holds `run_manifest.json`,
//! `accuracy.csv` and one `<run_id>/` folder per trained model with
//! `model.ckpt` and `train_log.jsonl`.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_mixture, read_jsonl, write_jsonl, Dataset, GeneratorSpec, TaskDataset, TaskSpec, TrainingSet};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::train::{train, Scheme, TrainConfig, TrainLog};

pub const MANIFEST_VERSION: u32 = 1;
pub const DATA_MANIFEST: &str = "manifest.json";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const ACCURACY_CSV: &str = "accuracy.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub task_id: usize,
    pub family_id: usize,
    pub n_classes: usize,
    pub file: String,
    pub n_train: usize,
    pub n_dev: usize,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub version: u32,
    pub seed: u64,
    pub spec: GeneratorSpec,
    pub tasks: Vec<TaskFile>,
    pub dataset_hash: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Writes every task of `ds` and a manifest into `dir` (created if needed).
pub fn write_dataset(ds: &Dataset, spec: &GeneratorSpec, seed: u64, dir: &Path) -> Result<DataManifest> {
    fs::create_dir_all(dir)?;
    let mut tasks = Vec::new();
    for t in &ds.tasks {
        let file = format!("task_{}.jsonl", t.spec.task_id);
        write_jsonl(&dir.join(&file), t)?;
        tasks.push(TaskFile {
            task_id: t.spec.task_id,
            family_id: t.spec.family_id,
            n_classes: t.spec.n_classes,
            file,
            n_train: t.train.len(),
            n_dev: t.dev.len(),
            content_hash: t.content_hash(),
        });
    }
    let manifest =
        DataManifest { version: MANIFEST_VERSION, seed, spec: spec.clone(), tasks, dataset_hash: ds.content_hash() };
    write_json(&dir.join(DATA_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Loads a dataset directory, checking each task file against its recorded hash.
pub fn read_dataset(dir: &Path) -> Result<(DataManifest, Vec<TaskDataset>)> {
    let path = dir.join(DATA_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let manifest: DataManifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Config(format!("{}: unsupported version {}", path.display(), manifest.version)));
    }
    let mut tasks = Vec::new();
    for tf in &manifest.tasks {
        let (train, dev) = read_jsonl(&dir.join(&tf.file))?;
        let task = TaskDataset {
            vocab_size: manifest.spec.vocab_size,
            seq_len: manifest.spec.seq_len,
            spec: TaskSpec { task_id: tf.task_id, family_id: tf.family_id, n_classes: tf.n_classes },
            train,
            dev,
        };
        if task.content_hash() != tf.content_hash {
            return Err(Error::Config(format!("{}: content hash does not match the manifest", tf.file)));
        }
        tasks.push(task);
    }
    Ok((manifest, tasks))
}

/// The JSON document read by `mept train --config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub run_id: String,
    pub config: RunConfig,
    pub dataset_hash: String,
    pub code_revision: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// Model folders written by the run, in task order.
    pub models: Vec<String>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn code_revision() -> String {
    format!("mept-core-{}", env!("CARGO_PKG_VERSION"))
}

/// Stable identifier derived from the resolved config and the data.
pub fn run_id(config: &RunConfig, dataset_hash: &str) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update(dataset_hash.as_bytes());
    Ok(hex::encode(h.finalize())[..12].to_string())
}

/// Result of [`train_run`].
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub manifest: RunManifest,
    /// `(model folder, tasks covered, log)` per trained model.
    pub models: Vec<(String, Vec<usize>, TrainLog)>,
    /// Final dev accuracy per task, in task order.
    pub accuracy: Vec<(usize, f64)>,
}

pub fn accuracy_csv(accuracy: &[(usize, f64)]) -> String {
    let header: Vec<String> = accuracy.iter().map(|(t, _)| format!("task_{t}")).collect();
    let values: Vec<String> = accuracy.iter().map(|(_, a)| a.to_string()).collect();
    format!("{}\n{}\n", header.join(","), values.join(","))
}

/// Trains under `config.train.scheme` and writes every artifact under `out`.
/// The run manifest is written before training starts and rewritten with the
/// finish time afterwards.
pub fn train_run(config: &RunConfig, tasks: &[TaskDataset], dataset_hash: &str, out: &Path) -> Result<TrainRun> {
    config.model.validate()?;
    config.train.validate()?;
    let run_id = run_id(config, dataset_hash)?;
    let sets: Vec<(String, TrainingSet)> = match config.train.scheme {
        Scheme::Mixture => vec![(run_id.clone(), make_mixture(tasks, config.train.seed)?)],
        Scheme::Separate => {
            if tasks.is_empty() {
                return Err(Error::EmptyDataset("no task datasets".into()));
            }
            tasks.iter().map(|t| (format!("{run_id}-task{}", t.spec.task_id), TrainingSet::single(t))).collect()
        }
    };
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest {
        version: MANIFEST_VERSION,
        run_id,
        config: config.clone(),
        dataset_hash: dataset_hash.to_string(),
        code_revision: code_revision(),
        started_unix: now_unix(),
        finished_unix: None,
        models: sets.iter().map(|(id, _)| id.clone()).collect(),
    };
    write_json(&out.join(RUN_MANIFEST), &manifest)?;

    let mut models = Vec::new();
    let mut accuracy = Vec::new();
    for (id, set) in &sets {
        let dir: PathBuf = out.join(id);
        fs::create_dir_all(&dir)?;
        let mut model = Model::new(config.model.clone())?;
        let mut log_file = BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?);
        let mut log = train(&mut model, set, &config.train, Some(&mut log_file))?;
        let ckpt = dir.join("model.ckpt");
        model.save(&ckpt)?;
        log.checkpoint = Some(format!("{id}/model.ckpt"));
        let eval = log.final_eval().ok_or_else(|| Error::EmptyDataset("no dev evaluation".into()))?;
        accuracy.extend(eval.per_task.iter().map(|(&t, &a)| (t, a)));
        models.push((id.clone(), set.task_ids(), log));
    }
    accuracy.sort_by_key(|&(t, _)| t);
    fs::write(out.join(ACCURACY_CSV), accuracy_csv(&accuracy))?;
    manifest.finished_unix = Some(now_unix());
    write_json(&out.join(RUN_MANIFEST), &manifest)?;
    Ok(TrainRun { manifest, models, accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    #[test]
    fn dataset_round_trip_and_tamper_detection() {
        let spec = GeneratorSpec { n_train: 10, n_dev: 4, ..GeneratorSpec::default() };
        let ds = generate(&spec, 2).unwrap();
        let dir = std::env::temp_dir().join(format!("mept-runs-{}", std::process::id()));
        let m = write_dataset(&ds, &spec, 2, &dir).unwrap();
        assert_eq!(m.tasks.len(), 6);
        let (m2, tasks) = read_dataset(&dir).unwrap();
        assert_eq!(m, m2);
        assert_eq!(tasks, ds.tasks);
        let f = dir.join("task_0.jsonl");
        let text = fs::read_to_string(&f).unwrap();
        fs::write(&f, text.replacen("\"label\":0", "\"label\":1", 1)).unwrap();
        assert!(matches!(read_dataset(&dir), Err(Error::Config(_))));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn run_config_defaults_fill_in() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 2}}"#).unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.model, ModelConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
    }

    #[test]
    fn accuracy_table_layout() {
        assert_eq!(accuracy_csv(&[(0, 0.5), (2, 1.0)]), "task_0,task_2\n0.5,1\n");
    }
}
