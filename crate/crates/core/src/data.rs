//! Synthetic multi-task sequence classification data.
//!
//! Tasks are grouped into families. Every example of a task is a token
//! sequence of background noise with one class-identifying motif (a k-gram)
//! planted at a family-specific position. Tasks of the same family share the
//! motif vocabulary, the motif-to-class assignment and most of the background
//! vocabulary; they differ in a small task-private background pool. Tasks of
//! different families share nothing but the padding token.
//!
//! Token layout, in allocation order: `0` is padding; then, per family, its
//! motif pool and its background pool; then one private pool per task.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seeds::derive_seed;

pub const PAD: u32 = 0;
pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub family_id: usize,
    pub n_classes: usize,
}

fn default_version() -> u32 {
    SPEC_VERSION
}

/// Generator recipe; this is the JSON document read by `mept generate --spec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    #[serde(default = "default_version")]
    pub version: u32,
    pub vocab_size: usize,
    /// Padded length; every sequence has at most this many tokens.
    pub seq_len: usize,
    /// Shortest unpadded sequence.
    pub min_len: usize,
    pub motif_len: usize,
    pub n_train: usize,
    pub n_dev: usize,
    /// Motif tokens per family.
    pub motif_pool: usize,
    /// Background tokens shared by a family.
    pub family_pool: usize,
    /// Background tokens private to a task.
    pub task_pool: usize,
    /// Probability that a background position draws from the task-private pool.
    pub task_token_rate: f64,
    pub tasks: Vec<TaskSpec>,
}

impl Default for GeneratorSpec {
    /// Three families of two tasks each, 2-3 classes per task.
    fn default() -> Self {
        let classes = [2, 3, 3, 2, 2, 3];
        Self {
            version: SPEC_VERSION,
            vocab_size: 256,
            seq_len: 32,
            min_len: 24,
            motif_len: 2,
            n_train: 512,
            n_dev: 128,
            motif_pool: 8,
            family_pool: 40,
            task_pool: 16,
            task_token_rate: 0.3,
            tasks: classes
                .iter()
                .enumerate()
                .map(|(i, &n_classes)| TaskSpec { task_id: i, family_id: i / 2, n_classes })
                .collect(),
        }
    }
}

/// Concrete token pattern of one task, resolved from a [`GeneratorSpec`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPattern {
    pub spec: TaskSpec,
    pub motif_position: usize,
    /// `class_motifs[c]` is the k-gram planted for class `c`.
    pub class_motifs: Vec<Vec<u32>>,
    pub family_tokens: Vec<u32>,
    pub task_tokens: Vec<u32>,
}

impl TaskPattern {
    pub fn motif_tokens(&self) -> BTreeSet<u32> {
        self.class_motifs.iter().flatten().copied().collect()
    }

    /// Class whose motif sits at the motif position, if any.
    pub fn classify(&self, tokens: &[u32]) -> Option<usize> {
        let k = self.class_motifs.first()?.len();
        let window = tokens.get(self.motif_position..self.motif_position + k)?;
        self.class_motifs.iter().position(|m| m.as_slice() == window)
    }
}

pub fn jaccard(a: &BTreeSet<u32>, b: &BTreeSet<u32>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
    pub task: usize,
}

/// Train and dev examples of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub patterns: Vec<TaskPattern>,
    pub tasks: Vec<TaskDataset>,
}

/// What a training run consumes: one (possibly mixed) training stream and a
/// dev set per task.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub train: Vec<Example>,
    pub dev: BTreeMap<usize, Vec<Example>>,
}

impl TrainingSet {
    pub fn single(task: &TaskDataset) -> Self {
        Self {
            vocab_size: task.vocab_size,
            seq_len: task.seq_len,
            n_classes: task.spec.n_classes,
            train: task.train.clone(),
            dev: BTreeMap::from([(task.spec.task_id, task.dev.clone())]),
        }
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.dev.keys().copied().collect()
    }
}

/// A padded minibatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub token_ids: Vec<Vec<u32>>,
    /// `true` marks a real token, `false` padding.
    pub pad_mask: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
    pub task_ids: Vec<usize>,
}

impl Batch {
    /// Pads every example to `seq_len` (longer examples are kept whole).
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>, seq_len: usize) -> Self {
        let mut b = Batch { token_ids: vec![], pad_mask: vec![], labels: vec![], task_ids: vec![] };
        for ex in examples {
            let len = seq_len.max(ex.tokens.len());
            let mut toks = ex.tokens.clone();
            toks.resize(len, PAD);
            b.pad_mask.push((0..len).map(|i| i < ex.tokens.len()).collect());
            b.token_ids.push(toks);
            b.labels.push(ex.label);
            b.task_ids.push(ex.task);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.version != SPEC_VERSION {
            return fail(format!("unsupported spec version {}", self.version));
        }
        if self.tasks.is_empty() {
            return fail("tasks: at least one task required".into());
        }
        let ids: BTreeSet<usize> = self.tasks.iter().map(|t| t.task_id).collect();
        if ids.len() != self.tasks.len() {
            return fail("tasks: task_id values must be distinct".into());
        }
        if let Some(t) = self.tasks.iter().find(|t| t.n_classes < 2) {
            return fail(format!("tasks[{}].n_classes: need at least 2", t.task_id));
        }
        if self.motif_len == 0 {
            return fail("motif_len: must be positive".into());
        }
        if self.min_len < self.motif_len || self.min_len > self.seq_len {
            return fail(format!(
                "min_len: need motif_len ({}) <= min_len ({}) <= seq_len ({})",
                self.motif_len, self.min_len, self.seq_len
            ));
        }
        if !(0.0..=1.0).contains(&self.task_token_rate) {
            return fail("task_token_rate: must lie in [0, 1]".into());
        }
        if self.family_pool == 0 || self.task_pool == 0 {
            return fail("family_pool and task_pool must be positive".into());
        }
        for fam in self.families() {
            let max_classes = self.tasks.iter().filter(|t| t.family_id == fam).map(|t| t.n_classes).max().unwrap_or(0);
            if max_classes * self.motif_len > self.motif_pool {
                return fail(format!(
                    "motif_pool: family {fam} needs {} motif tokens, pool has {}",
                    max_classes * self.motif_len,
                    self.motif_pool
                ));
            }
        }
        let needed = self.required_vocab();
        if needed > self.vocab_size {
            return fail(format!("vocab_size: layout needs {needed} tokens, have {}", self.vocab_size));
        }
        Ok(())
    }

    fn families(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.family_id).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn required_vocab(&self) -> usize {
        1 + self.families().len() * (self.motif_pool + self.family_pool) + self.tasks.len() * self.task_pool
    }

    pub fn max_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.n_classes).max().unwrap_or(0)
    }

    /// Resolves the token pattern of every task (in `tasks` order).
    pub fn patterns(&self, seed: u64) -> Result<Vec<TaskPattern>> {
        self.validate()?;
        let mut next = 1u32;
        let mut alloc = |n: usize| {
            let r: Vec<u32> = (next..next + n as u32).collect();
            next += n as u32;
            r
        };
        let mut fam_layout = BTreeMap::new();
        for fam in self.families() {
            let motif = alloc(self.motif_pool);
            let background = alloc(self.family_pool);
            fam_layout.insert(fam, (motif, background));
        }
        let task_pools: Vec<Vec<u32>> = self.tasks.iter().map(|_| alloc(self.task_pool)).collect();

        let mut fam_motifs = BTreeMap::new();
        for (&fam, (motif, _)) in &fam_layout {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4641_4d00 + fam as u64));
            let mut toks = motif.clone();
            toks.shuffle(&mut rng);
            let position = rng.random_range(0..=self.min_len - self.motif_len);
            fam_motifs.insert(fam, (toks, position));
        }
        Ok(self
            .tasks
            .iter()
            .zip(task_pools)
            .map(|(t, task_tokens)| {
                let (toks, position) = &fam_motifs[&t.family_id];
                TaskPattern {
                    spec: t.clone(),
                    motif_position: *position,
                    class_motifs: (0..t.n_classes)
                        .map(|c| toks[c * self.motif_len..(c + 1) * self.motif_len].to_vec())
                        .collect(),
                    family_tokens: fam_layout[&t.family_id].1.clone(),
                    task_tokens,
                }
            })
            .collect())
    }
}

fn sample_examples(spec: &GeneratorSpec, pat: &TaskPattern, n: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
    let classes = pat.spec.n_classes;
    let mut out: Vec<Example> = (0..n)
        .map(|i| {
            let label = i % classes;
            let len = rng.random_range(spec.min_len..=spec.seq_len);
            let mut tokens: Vec<u32> = (0..len)
                .map(|_| {
                    let pool =
                        if rng.random_bool(spec.task_token_rate) { &pat.task_tokens } else { &pat.family_tokens };
                    pool[rng.random_range(0..pool.len())]
                })
                .collect();
            let p = pat.motif_position;
            tokens[p..p + spec.motif_len].copy_from_slice(&pat.class_motifs[label]);
            Example { tokens, label, task: pat.spec.task_id }
        })
        .collect();
    out.shuffle(rng);
    out
}

/// Generates every task of `spec`. Pure in `(spec, seed)`.
pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<Dataset> {
    let patterns = spec.patterns(seed)?;
    let tasks = patterns
        .iter()
        .map(|pat| {
            let id = pat.spec.task_id as u64;
            let mut train_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7261_0000 + id));
            let mut dev_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6465_0000 + id));
            TaskDataset {
                vocab_size: spec.vocab_size,
                seq_len: spec.seq_len,
                spec: pat.spec.clone(),
                train: sample_examples(spec, pat, spec.n_train, &mut train_rng),
                dev: sample_examples(spec, pat, spec.n_dev, &mut dev_rng),
            }
        })
        .collect();
    Ok(Dataset { vocab_size: spec.vocab_size, seq_len: spec.seq_len, patterns, tasks })
}

/// Shuffles the union of the tasks' training sets; dev sets stay per task.
pub fn make_mixture(parts: &[TaskDataset], seed: u64) -> Result<TrainingSet> {
    let first = parts.first().ok_or_else(|| Error::EmptyDataset("no task datasets to mix".into()))?;
    if let Some(p) = parts.iter().find(|p| p.vocab_size != first.vocab_size || p.seq_len != first.seq_len) {
        return Err(Error::Config(format!(
            "task {} has vocab/seq_len {}/{} but task {} has {}/{}",
            p.spec.task_id, p.vocab_size, p.seq_len, first.spec.task_id, first.vocab_size, first.seq_len
        )));
    }
    let mut train: Vec<Example> = parts.iter().flat_map(|p| p.train.iter().cloned()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6d69_7800));
    train.shuffle(&mut rng);
    Ok(TrainingSet {
        vocab_size: first.vocab_size,
        seq_len: first.seq_len,
        n_classes: parts.iter().map(|p| p.spec.n_classes).max().unwrap_or(0),
        train,
        dev: parts.iter().map(|p| (p.spec.task_id, p.dev.clone())).collect(),
    })
}

fn hash_examples(h: &mut Sha256, examples: &[Example]) {
    for ex in examples {
        h.update((ex.task as u64).to_le_bytes());
        h.update((ex.label as u64).to_le_bytes());
        h.update((ex.tokens.len() as u64).to_le_bytes());
        for t in &ex.tokens {
            h.update(t.to_le_bytes());
        }
    }
}

/// SHA-256 over examples in order, as lowercase hex.
pub fn examples_hash(examples: &[Example]) -> String {
    let mut h = Sha256::new();
    hash_examples(&mut h, examples);
    hex::encode(h.finalize())
}

impl TaskDataset {
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vocab_size as u64).to_le_bytes());
        h.update((self.seq_len as u64).to_le_bytes());
        hash_examples(&mut h, &self.train);
        h.update(b"dev");
        hash_examples(&mut h, &self.dev);
        hex::encode(h.finalize())
    }
}

impl Dataset {
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tasks {
            h.update(t.content_hash().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl TrainingSet {
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vocab_size as u64).to_le_bytes());
        h.update((self.seq_len as u64).to_le_bytes());
        hash_examples(&mut h, &self.train);
        for (t, dev) in &self.dev {
            h.update((*t as u64).to_le_bytes());
            hash_examples(&mut h, dev);
        }
        hex::encode(h.finalize())
    }
}

// ---- JSON-lines I/O ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

/// One line of a task file: `{"tokens":[...],"label":k,"task":t,"split":"train"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub tokens: Vec<u32>,
    pub label: usize,
    pub task: usize,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Train
}

pub fn write_jsonl(path: &Path, task: &TaskDataset) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (split, examples) in [(Split::Train, &task.train), (Split::Dev, &task.dev)] {
        for ex in examples {
            let rec = ExampleRecord { tokens: ex.tokens.clone(), label: ex.label, task: ex.task, split };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a task file; returns `(train, dev)`. Errors name the offending line.
pub fn read_jsonl(path: &Path) -> Result<(Vec<Example>, Vec<Example>)> {
    let r = BufReader::new(fs::File::open(path)?);
    let (mut train, mut dev) = (vec![], vec![]);
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let ex = Example { tokens: rec.tokens, label: rec.label, task: rec.task };
        match rec.split {
            Split::Train => train.push(ex),
            Split::Dev => dev.push(ex),
        }
    }
    Ok((train, dev))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GeneratorSpec {
        GeneratorSpec { n_train: 60, n_dev: 30, ..GeneratorSpec::default() }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate(&small_spec(), 3).unwrap();
        let b = generate(&small_spec(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        let c = generate(&small_spec(), 4).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn single_task_is_balanced() {
        let spec = GeneratorSpec {
            tasks: vec![TaskSpec { task_id: 0, family_id: 0, n_classes: 2 }],
            n_train: 1000,
            ..GeneratorSpec::default()
        };
        let ds = generate(&spec, 1).unwrap();
        let ones = ds.tasks[0].train.iter().filter(|e| e.label == 1).count();
        // majority-class baseline is exactly 0.5 on balanced generation
        assert_eq!(ones, 500);
    }

    #[test]
    fn motif_vocabulary_overlap_by_family() {
        let spec = GeneratorSpec::default();
        let pats = spec.patterns(0).unwrap();
        for a in &pats {
            for b in &pats {
                if a.spec.task_id == b.spec.task_id {
                    continue;
                }
                let j = jaccard(&a.motif_tokens(), &b.motif_tokens());
                if a.spec.family_id == b.spec.family_id {
                    assert!(j > 0.5, "tasks {} {}: {j}", a.spec.task_id, b.spec.task_id);
                } else {
                    assert_eq!(j, 0.0);
                }
            }
        }
    }

    #[test]
    fn every_example_carries_its_motif() {
        let ds = generate(&small_spec(), 9).unwrap();
        for (pat, task) in ds.patterns.iter().zip(&ds.tasks) {
            for ex in task.train.iter().chain(&task.dev) {
                assert_eq!(pat.classify(&ex.tokens), Some(ex.label));
                assert!(ex.tokens.len() <= ds.seq_len);
                assert!(ex.tokens.iter().all(|&t| t != PAD && (t as usize) < ds.vocab_size));
            }
        }
    }

    #[test]
    fn motif_tokens_never_appear_in_background() {
        let ds = generate(&small_spec(), 2).unwrap();
        let motif: BTreeSet<u32> = ds.patterns.iter().flat_map(|p| p.motif_tokens()).collect();
        for (pat, task) in ds.patterns.iter().zip(&ds.tasks) {
            for ex in &task.train {
                for (i, t) in ex.tokens.iter().enumerate() {
                    let in_window = (pat.motif_position..pat.motif_position + 2).contains(&i);
                    assert_eq!(motif.contains(t), in_window);
                }
            }
        }
    }

    #[test]
    fn short_sequences_rejected() {
        let spec = GeneratorSpec { seq_len: 1, min_len: 1, ..GeneratorSpec::default() };
        assert!(matches!(generate(&spec, 0), Err(Error::Config(_))));
        let spec = GeneratorSpec { vocab_size: 64, ..GeneratorSpec::default() };
        assert!(generate(&spec, 0).is_err());
    }

    #[test]
    fn mixture_conserves_counts() {
        let ds = generate(&small_spec(), 5).unwrap();
        let a = TaskDataset { train: ds.tasks[0].train[..50].to_vec(), ..ds.tasks[0].clone() };
        let mut b = ds.tasks[1].clone();
        b.train = (0..3).flat_map(|_| b.train.clone()).collect();
        let mix = make_mixture(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(mix.train.len(), a.train.len() + b.train.len());
        assert_eq!(mix.train.iter().filter(|e| e.task == 0).count(), a.train.len());
        assert_eq!(mix.train.iter().filter(|e| e.task == 1).count(), b.train.len());
        assert_eq!(mix.dev.len(), 2);
    }

    #[test]
    fn mixture_of_one_is_a_permutation() {
        let ds = generate(&small_spec(), 5).unwrap();
        let mix = make_mixture(&ds.tasks[..1], 8).unwrap();
        let mut a = mix.train.clone();
        let mut b = ds.tasks[0].train.clone();
        a.sort_by(|x, y| x.tokens.cmp(&y.tokens));
        b.sort_by(|x, y| x.tokens.cmp(&y.tokens));
        assert_eq!(a, b);
    }

    #[test]
    fn mixture_order_is_pinned() {
        let ds = generate(&GeneratorSpec::default(), 0).unwrap();
        let mix = make_mixture(&ds.tasks, 0).unwrap();
        assert_eq!(mix.train.len(), 6 * 512);
        let again = make_mixture(&ds.tasks, 0).unwrap();
        assert_eq!(examples_hash(&mix.train), examples_hash(&again.train));
        assert_eq!(examples_hash(&mix.train), GOLDEN_MIXTURE_HASH);
    }

    // Recorded from the first run of the default recipe (seed 0, mixture seed 0).
    const GOLDEN_MIXTURE_HASH: &str = "5f4d15fa7ef1d1f1693b3d8bfdac80a0e96bdcec70c8fce75fd04ac8bf811629";

    #[test]
    fn mixture_rejects_vocab_mismatch() {
        let ds = generate(&small_spec(), 5).unwrap();
        let mut b = ds.tasks[1].clone();
        b.vocab_size += 1;
        assert!(make_mixture(&[ds.tasks[0].clone(), b], 0).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = generate(&small_spec(), 5).unwrap();
        let dir = std::env::temp_dir().join(format!("mept-data-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t0.jsonl");
        write_jsonl(&path, &ds.tasks[0]).unwrap();
        let (train, dev) = read_jsonl(&path).unwrap();
        assert_eq!(train, ds.tasks[0].train);
        assert_eq!(dev, ds.tasks[0].dev);
        fs::write(&path, "{\"tokens\":[1],\"label\":0,\"task\":0}\n{oops}\n").unwrap();
        let err = read_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn batch_pads_to_seq_len() {
        let exs = [Example { tokens: vec![5, 6], label: 1, task: 0 }, Example { tokens: vec![7], label: 0, task: 2 }];
        let b = Batch::from_examples(&exs, 4);
        assert_eq!(b.token_ids, vec![vec![5, 6, 0, 0], vec![7, 0, 0, 0]]);
        assert_eq!(b.pad_mask[1], vec![true, false, false, false]);
        assert_eq!(b.task_ids, vec![0, 2]);
    }
}
