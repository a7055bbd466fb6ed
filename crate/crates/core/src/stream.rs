//! Stream construction: class-incremental and time-incremental sparsely
//! labeled task sequences.
//!
//! A stream is built in three steps: hold out a seeded per-class test split,
//! partition the remaining examples into tasks (by class group or by
//! timestamp), and sparsify labels per class with nested seeded sampling so
//! the labeled set at a lower rate is always a subset of the labeled set at a
//! higher rate. Construction is single-threaded and deterministic; produced
//! tasks are immutable.

use crate::corpus::{ClassId, Corpus, ExampleId};
use crate::error::{Error, Result};
use crate::util::{derive_seed_indexed, fnv1a64};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    ClassIncremental,
    TimeIncremental,
}

/// How labels are thinned within a task: per class (every class keeps a
/// ceiling share of its labels) or globally over the task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsifyScope {
    #[default]
    PerClass,
    Global,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StreamConfig {
    pub mode: StreamMode,
    pub num_tasks: usize,
    /// Fraction of each task's examples that keep their labels, in (0, 1].
    pub label_rate: f64,
    pub seed: u64,
    /// Held out of the stream per class before task construction.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub sparsify_scope: SparsifyScope,
    /// Recorded provenance of the corpus this stream was built from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_manifest: Option<PathBuf>,
}

fn default_test_fraction() -> f64 {
    0.1
}

/// One stream element as the learner sees it: the label is present only if
/// it was revealed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamExample {
    pub id: ExampleId,
    pub label: Option<ClassId>,
    pub timestamp: Option<f64>,
}

/// One time step of the stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamTask {
    index: usize,
    labeled: Vec<StreamExample>,
    unlabeled: Vec<StreamExample>,
    test: Vec<StreamExample>,
    classes: BTreeSet<ClassId>,
    /// True classes of the unlabeled examples; kept internal so repeated
    /// sparsification can regroup by class without re-exposing labels.
    withheld: BTreeMap<ExampleId, ClassId>,
}

impl StreamTask {
    /// Assemble a task from parts, checking the structural invariants.
    pub fn from_parts(
        index: usize,
        labeled: Vec<StreamExample>,
        unlabeled: Vec<StreamExample>,
        test: Vec<StreamExample>,
        classes: BTreeSet<ClassId>,
        withheld: BTreeMap<ExampleId, ClassId>,
    ) -> Result<Self> {
        let task = Self { index, labeled, unlabeled, test, classes, withheld };
        task.validate()?;
        Ok(task)
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn labeled(&self) -> &[StreamExample] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[StreamExample] {
        &self.unlabeled
    }

    pub fn test(&self) -> &[StreamExample] {
        &self.test
    }

    pub fn classes(&self) -> &BTreeSet<ClassId> {
        &self.classes
    }

    /// Revealed-plus-hidden example count `n^t`.
    pub fn total_train(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    fn validate(&self) -> Result<()> {
        let labeled_ids: HashSet<&ExampleId> = self.labeled.iter().map(|e| &e.id).collect();
        if labeled_ids.len() != self.labeled.len() {
            return Err(Error::Contract(format!(
                "task {} has duplicate labeled ids",
                self.index
            )));
        }
        for e in &self.unlabeled {
            if labeled_ids.contains(&e.id) {
                return Err(Error::Contract(format!(
                    "task {} id {} is both labeled and unlabeled",
                    self.index, e.id
                )));
            }
            if e.label.is_some() {
                return Err(Error::Contract(format!(
                    "task {} unlabeled example {} exposes a label",
                    self.index, e.id
                )));
            }
        }
        for e in &self.labeled {
            match e.label {
                Some(c) if self.classes.contains(&c) => {}
                Some(c) => {
                    return Err(Error::Contract(format!(
                        "task {} labeled example {} has class {} outside roster",
                        self.index, e.id, c
                    )))
                }
                None => {
                    return Err(Error::Contract(format!(
                        "task {} labeled example {} lacks a label",
                        self.index, e.id
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Dispatch on `cfg.mode`.
pub fn build_stream(corpus: &Corpus, cfg: &StreamConfig) -> Result<Vec<StreamTask>> {
    match cfg.mode {
        StreamMode::ClassIncremental => build_class_incremental_stream(corpus, cfg),
        StreamMode::TimeIncremental => build_time_incremental_stream(corpus, cfg),
    }
}

/// Partition classes into `num_tasks` near-equal groups by seeded shuffle;
/// each task receives every remaining example of its classes.
pub fn build_class_incremental_stream(
    corpus: &Corpus,
    cfg: &StreamConfig,
) -> Result<Vec<StreamTask>> {
    if cfg.mode != StreamMode::ClassIncremental {
        return Err(Error::Config("stream mode is not class_incremental".into()));
    }
    check_rate(cfg.label_rate)?;
    if corpus.is_empty() {
        return Err(Error::Ingestion("empty corpus".into()));
    }
    let mut nonempty: BTreeSet<ClassId> = corpus.entries().iter().map(|e| e.class).collect();
    if nonempty.len() < cfg.num_tasks {
        return Err(Error::Config(format!(
            "{} nonempty classes cannot fill {} tasks",
            nonempty.len(),
            cfg.num_tasks
        )));
    }
    let mut classes: Vec<ClassId> = std::mem::take(&mut nonempty).into_iter().collect();
    let mut rng = crate::util::rng_for(cfg.seed, "class-partition");
    classes.shuffle(&mut rng);
    let groups = near_equal_groups(&classes, cfg.num_tasks);

    let holdout = test_holdout(corpus, cfg);
    let mut by_class: HashMap<ClassId, Vec<usize>> = HashMap::new();
    for (i, e) in corpus.entries().iter().enumerate() {
        by_class.entry(e.class).or_default().push(i);
    }

    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    for (t, group) in groups.into_iter().enumerate() {
        let roster: BTreeSet<ClassId> = group.into_iter().collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &class in &roster {
            for &i in &by_class[&class] {
                let entry = &corpus.entries()[i];
                let ex = StreamExample {
                    id: entry.id.clone(),
                    label: Some(entry.class),
                    timestamp: entry.timestamp,
                };
                if holdout.contains(&entry.id) {
                    test.push(ex);
                } else {
                    train.push(ex);
                }
            }
        }
        let full = StreamTask::from_parts(t, train, Vec::new(), test, roster, BTreeMap::new())?;
        tasks.push(apply_sparsify(full, cfg, t)?);
    }
    Ok(tasks)
}

/// Sort by (timestamp, id) and slice into `num_tasks` contiguous near-equal
/// chunks; class rosters may overlap across tasks.
pub fn build_time_incremental_stream(
    corpus: &Corpus,
    cfg: &StreamConfig,
) -> Result<Vec<StreamTask>> {
    if cfg.mode != StreamMode::TimeIncremental {
        return Err(Error::Config("stream mode is not time_incremental".into()));
    }
    check_rate(cfg.label_rate)?;
    if corpus.is_empty() {
        return Err(Error::Ingestion("empty corpus".into()));
    }
    for e in corpus.entries() {
        if e.timestamp.is_none() {
            return Err(Error::Ingestion(format!(
                "example {} has no timestamp; time-incremental streams need one",
                e.id
            )));
        }
    }
    if cfg.num_tasks == 0 || corpus.len() < cfg.num_tasks {
        return Err(Error::Config(format!(
            "{} examples cannot fill {} tasks",
            corpus.len(),
            cfg.num_tasks
        )));
    }

    let holdout = test_holdout(corpus, cfg);
    let mut train_idx: Vec<usize> = Vec::new();
    let mut test_idx: Vec<usize> = Vec::new();
    for (i, e) in corpus.entries().iter().enumerate() {
        if holdout.contains(&e.id) {
            test_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    let by_time = |&i: &usize| {
        let e = &corpus.entries()[i];
        (
            ordered_float(e.timestamp.expect("checked above")),
            e.id.clone(),
        )
    };
    train_idx.sort_by_key(by_time);
    test_idx.sort_by_key(by_time);

    let train_chunks = near_equal_groups(&train_idx, cfg.num_tasks);
    let test_chunks = near_equal_groups(&test_idx, cfg.num_tasks);

    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    for (t, chunk) in train_chunks.into_iter().enumerate() {
        let mut roster = BTreeSet::new();
        let mut train = Vec::with_capacity(chunk.len());
        for i in chunk {
            let e = &corpus.entries()[i];
            roster.insert(e.class);
            train.push(StreamExample {
                id: e.id.clone(),
                label: Some(e.class),
                timestamp: e.timestamp,
            });
        }
        let test = test_chunks[t]
            .iter()
            .map(|&i| {
                let e = &corpus.entries()[i];
                StreamExample {
                    id: e.id.clone(),
                    label: Some(e.class),
                    timestamp: e.timestamp,
                }
            })
            .collect();
        let full = StreamTask::from_parts(t, train, Vec::new(), test, roster, BTreeMap::new())?;
        tasks.push(apply_sparsify(full, cfg, t)?);
    }
    Ok(tasks)
}

fn apply_sparsify(task: StreamTask, cfg: &StreamConfig, t: usize) -> Result<StreamTask> {
    let seed = derive_seed_indexed(cfg.seed, "sparsify", t as u64);
    match cfg.sparsify_scope {
        SparsifyScope::PerClass => sparsify_labels(&task, cfg.label_rate, seed),
        SparsifyScope::Global => sparsify_labels_global(&task, cfg.label_rate, seed),
    }
}

/// Keep `ceil(rate * count(c))` labels per class `c`, selected by seeded
/// hash order, and withhold the rest. Selection is nested: the labeled set
/// at a lower rate is a prefix of the labeled set at any higher rate.
pub fn sparsify_labels(task: &StreamTask, rate: f64, seed: u64) -> Result<StreamTask> {
    check_rate(rate)?;
    let mut pools: BTreeMap<ClassId, Vec<ExampleId>> = BTreeMap::new();
    for e in &task.labeled {
        pools
            .entry(e.label.expect("validated labeled"))
            .or_default()
            .push(e.id.clone());
    }
    for e in &task.unlabeled {
        let class = task.withheld.get(&e.id).ok_or_else(|| {
            Error::Contract(format!(
                "cannot sparsify: unlabeled example {} has no recorded class",
                e.id
            ))
        })?;
        pools.entry(*class).or_default().push(e.id.clone());
    }

    let mut keep: HashSet<ExampleId> = HashSet::new();
    for (_, mut ids) in pools.clone() {
        sort_by_hash(&mut ids, seed);
        let k = ceil_count(rate, ids.len());
        keep.extend(ids.into_iter().take(k));
    }
    rebuild_sparsified(task, &pools, keep)
}

/// Global-rate variant: `ceil(rate * n^t)` labels over the whole task,
/// ignoring class membership.
pub fn sparsify_labels_global(task: &StreamTask, rate: f64, seed: u64) -> Result<StreamTask> {
    check_rate(rate)?;
    let mut pools: BTreeMap<ClassId, Vec<ExampleId>> = BTreeMap::new();
    let mut all: Vec<ExampleId> = Vec::with_capacity(task.total_train());
    for e in &task.labeled {
        let class = e.label.expect("validated labeled");
        pools.entry(class).or_default().push(e.id.clone());
        all.push(e.id.clone());
    }
    for e in &task.unlabeled {
        let class = task.withheld.get(&e.id).ok_or_else(|| {
            Error::Contract(format!(
                "cannot sparsify: unlabeled example {} has no recorded class",
                e.id
            ))
        })?;
        pools.entry(*class).or_default().push(e.id.clone());
        all.push(e.id.clone());
    }
    sort_by_hash(&mut all, seed);
    let k = ceil_count(rate, all.len());
    let keep: HashSet<ExampleId> = all.into_iter().take(k).collect();
    rebuild_sparsified(task, &pools, keep)
}

fn rebuild_sparsified(
    task: &StreamTask,
    pools: &BTreeMap<ClassId, Vec<ExampleId>>,
    keep: HashSet<ExampleId>,
) -> Result<StreamTask> {
    let mut timestamps: HashMap<&ExampleId, Option<f64>> = HashMap::new();
    for e in task.labeled.iter().chain(&task.unlabeled) {
        timestamps.insert(&e.id, e.timestamp);
    }
    let mut labeled = Vec::with_capacity(keep.len());
    let mut unlabeled = Vec::new();
    let mut withheld = BTreeMap::new();
    for (&class, ids) in pools {
        for id in ids {
            let ts = timestamps[&id];
            if keep.contains(id) {
                labeled.push(StreamExample { id: id.clone(), label: Some(class), timestamp: ts });
            } else {
                withheld.insert(id.clone(), class);
                unlabeled.push(StreamExample { id: id.clone(), label: None, timestamp: ts });
            }
        }
    }
    // Canonical order keeps sparsification idempotent including ordering.
    labeled.sort_by(|a, b| a.id.cmp(&b.id));
    unlabeled.sort_by(|a, b| a.id.cmp(&b.id));
    StreamTask::from_parts(
        task.index,
        labeled,
        unlabeled,
        task.test.clone(),
        task.classes.clone(),
        withheld,
    )
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("label rate {rate} outside (0, 1]")));
    }
    Ok(())
}

/// `ceil(rate * n)` with a guard against float excess (e.g. 0.1 * 300).
fn ceil_count(rate: f64, n: usize) -> usize {
    (((rate * n as f64) - 1e-9).ceil().max(0.0) as usize).clamp(usize::from(n > 0), n)
}

fn sort_by_hash(ids: &mut [ExampleId], seed: u64) {
    ids.sort_by_cached_key(|id| {
        let mut bytes = Vec::with_capacity(16 + id.0.len());
        bytes.extend_from_slice(&seed.to_le_bytes());
        bytes.extend_from_slice(b"sparsify");
        bytes.extend_from_slice(id.0.as_bytes());
        (fnv1a64(&bytes), id.0.clone())
    });
}

/// Split `items` into `groups` contiguous chunks whose sizes differ by at
/// most one (earlier chunks take the remainder).
fn near_equal_groups<T: Clone>(items: &[T], groups: usize) -> Vec<Vec<T>> {
    let base = items.len() / groups;
    let extra = items.len() % groups;
    let mut out = Vec::with_capacity(groups);
    let mut cursor = 0;
    for g in 0..groups {
        let size = base + usize::from(g < extra);
        out.push(items[cursor..cursor + size].to_vec());
        cursor += size;
    }
    out
}

fn ordered_float(v: f64) -> u64 {
    // Total order for non-NaN timestamps.
    let bits = v.to_bits();
    if v >= 0.0 {
        bits ^ 0x8000_0000_0000_0000
    } else {
        !bits
    }
}

/// Seeded per-class holdout taken before task construction.
fn test_holdout(corpus: &Corpus, cfg: &StreamConfig) -> HashSet<ExampleId> {
    let mut holdout = HashSet::new();
    if cfg.test_fraction <= 0.0 {
        return holdout;
    }
    let mut by_class: BTreeMap<ClassId, Vec<ExampleId>> = BTreeMap::new();
    for e in corpus.entries() {
        by_class.entry(e.class).or_default().push(e.id.clone());
    }
    let seed = crate::util::derive_seed(cfg.seed, "test-holdout");
    for (_, mut ids) in by_class {
        if ids.len() < 2 {
            continue;
        }
        sort_by_hash(&mut ids, seed);
        let k = ((ids.len() as f64 * cfg.test_fraction).round() as usize)
            .clamp(1, ids.len() - 1);
        holdout.extend(ids.into_iter().take(k));
    }
    holdout
}

// ---------------------------------------------------------------------------
// Snapshots

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    config: StreamConfig,
    num_tasks: usize,
}

#[derive(Serialize, Deserialize)]
struct TaskSnapshot {
    index: usize,
    classes: Vec<ClassId>,
    labeled: Vec<String>,
    unlabeled: Vec<String>,
    test: Vec<String>,
}

/// Persist per-task id lists so a stream reloads bit-exactly.
pub fn write_stream_snapshot(dir: &Path, cfg: &StreamConfig, tasks: &[StreamTask]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let header = SnapshotHeader { config: cfg.clone(), num_tasks: tasks.len() };
    std::fs::write(dir.join("stream.json"), serde_json::to_string_pretty(&header)?)?;
    for task in tasks {
        let snap = TaskSnapshot {
            index: task.index,
            classes: task.classes.iter().copied().collect(),
            labeled: task.labeled.iter().map(|e| e.id.0.clone()).collect(),
            unlabeled: task.unlabeled.iter().map(|e| e.id.0.clone()).collect(),
            test: task.test.iter().map(|e| e.id.0.clone()).collect(),
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(
            dir.join(format!("task_{:04}.json", task.index)),
        )?);
        writeln!(f, "{}", serde_json::to_string(&snap)?)?;
    }
    Ok(())
}

/// Reload a snapshot; labels, timestamps, and withheld classes come from the
/// corpus records.
pub fn load_stream_snapshot(dir: &Path, corpus: &Corpus) -> Result<(StreamConfig, Vec<StreamTask>)> {
    let header: SnapshotHeader =
        serde_json::from_str(&std::fs::read_to_string(dir.join("stream.json"))?)?;
    let mut tasks = Vec::with_capacity(header.num_tasks);
    for t in 0..header.num_tasks {
        let snap: TaskSnapshot = serde_json::from_str(&std::fs::read_to_string(
            dir.join(format!("task_{t:04}.json")),
        )?)?;
        let lookup = |raw: &String, reveal: bool| -> Result<StreamExample> {
            let id = ExampleId(raw.clone());
            let entry = corpus
                .entry(&id)
                .ok_or_else(|| Error::Ingestion(format!("snapshot id {id} not in corpus")))?;
            Ok(StreamExample {
                id,
                label: reveal.then_some(entry.class),
                timestamp: entry.timestamp,
            })
        };
        let labeled: Vec<StreamExample> =
            snap.labeled.iter().map(|r| lookup(r, true)).collect::<Result<_>>()?;
        let unlabeled: Vec<StreamExample> =
            snap.unlabeled.iter().map(|r| lookup(r, false)).collect::<Result<_>>()?;
        let test: Vec<StreamExample> =
            snap.test.iter().map(|r| lookup(r, true)).collect::<Result<_>>()?;
        let withheld = unlabeled
            .iter()
            .map(|e| {
                let entry = corpus.entry(&e.id).expect("checked above");
                (e.id.clone(), entry.class)
            })
            .collect();
        tasks.push(StreamTask::from_parts(
            snap.index,
            labeled,
            unlabeled,
            test,
            snap.classes.into_iter().collect(),
            withheld,
        )?);
    }
    Ok((header.config, tasks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ImageShape, ManifestEntry};

    fn meta_corpus(classes: u32, per_class: usize, with_time: bool) -> Corpus {
        let mut entries = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                let id = format!("c{c:05}e{i:06}");
                entries.push(ManifestEntry {
                    id: ExampleId(id.clone()),
                    path: String::new(),
                    class: c,
                    timestamp: with_time
                        .then(|| (fnv1a64(id.as_bytes()) % 100_000) as f64),
                });
            }
        }
        Corpus::metadata_only(ImageShape::new(2, 2, 1), classes, entries).unwrap()
    }

    fn ci_cfg(num_tasks: usize, label_rate: f64) -> StreamConfig {
        StreamConfig {
            mode: StreamMode::ClassIncremental,
            num_tasks,
            label_rate,
            seed: 7,
            test_fraction: 0.0,
            sparsify_scope: SparsifyScope::PerClass,
            corpus_manifest: None,
        }
    }

    #[test]
    fn ten_classes_five_tasks_disjoint_pairs() {
        let corpus = meta_corpus(10, 6, false);
        let tasks = build_class_incremental_stream(&corpus, &ci_cfg(5, 1.0)).unwrap();
        assert_eq!(tasks.len(), 5);
        let mut seen = BTreeSet::new();
        for t in &tasks {
            assert_eq!(t.classes().len(), 2);
            for c in t.classes() {
                assert!(seen.insert(*c), "class {c} appears in two tasks");
            }
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn large_class_partition_matches_reported_split_size() {
        // 9459 classes over 20 tasks: nineteen groups of 473 and one of 472.
        let mut entries = Vec::with_capacity(9459);
        for c in 0..9459u32 {
            entries.push(ManifestEntry {
                id: ExampleId(format!("e{c}")),
                path: String::new(),
                class: c,
                timestamp: None,
            });
        }
        let corpus = Corpus::metadata_only(ImageShape::new(2, 2, 1), 9459, entries).unwrap();
        let tasks = build_class_incremental_stream(&corpus, &ci_cfg(20, 1.0)).unwrap();
        let sizes: Vec<usize> = tasks.iter().map(|t| t.classes().len()).collect();
        assert_eq!(sizes.iter().filter(|&&s| s == 473).count(), 19);
        assert_eq!(sizes.iter().filter(|&&s| s == 472).count(), 1);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let corpus = meta_corpus(12, 8, false);
        let cfg = ci_cfg(4, 0.25);
        let a = build_class_incremental_stream(&corpus, &cfg).unwrap();
        let b = build_class_incremental_stream(&corpus, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fewer_classes_than_tasks_is_config_error() {
        let corpus = meta_corpus(3, 4, false);
        let err = build_class_incremental_stream(&corpus, &ci_cfg(5, 1.0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn time_chunks_are_contiguous_and_equal() {
        let mut entries = Vec::new();
        for i in 0..100u32 {
            entries.push(ManifestEntry {
                id: ExampleId(format!("e{i:03}")),
                path: String::new(),
                class: i % 5,
                timestamp: Some(((i * 37) % 100) as f64),
            });
        }
        let corpus = Corpus::metadata_only(ImageShape::new(2, 2, 1), 5, entries).unwrap();
        let cfg = StreamConfig {
            mode: StreamMode::TimeIncremental,
            num_tasks: 4,
            label_rate: 1.0,
            seed: 3,
            test_fraction: 0.0,
            sparsify_scope: SparsifyScope::PerClass,
            corpus_manifest: None,
        };
        let tasks = build_time_incremental_stream(&corpus, &cfg).unwrap();
        assert_eq!(tasks.len(), 4);
        let mut prev_max = f64::NEG_INFINITY;
        for t in &tasks {
            assert_eq!(t.total_train(), 25);
            let ts: Vec<f64> = t
                .labeled()
                .iter()
                .map(|e| e.timestamp.unwrap())
                .collect();
            let lo = ts.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(prev_max <= lo, "chunk overlap: {prev_max} > {lo}");
            prev_max = hi;
        }
    }

    #[test]
    fn equal_timestamps_fall_back_to_id_order() {
        let mut entries = Vec::new();
        for i in 0..20u32 {
            entries.push(ManifestEntry {
                id: ExampleId(format!("e{i:02}")),
                path: String::new(),
                class: 0,
                timestamp: Some(5.0),
            });
        }
        let corpus = Corpus::metadata_only(ImageShape::new(2, 2, 1), 1, entries).unwrap();
        let cfg = StreamConfig {
            mode: StreamMode::TimeIncremental,
            num_tasks: 4,
            label_rate: 1.0,
            seed: 3,
            test_fraction: 0.0,
            sparsify_scope: SparsifyScope::PerClass,
            corpus_manifest: None,
        };
        let tasks = build_time_incremental_stream(&corpus, &cfg).unwrap();
        assert!(tasks.iter().all(|t| t.total_train() == 5));
        // First chunk covers the first five ids in lexicographic order.
        let ids: BTreeSet<String> =
            tasks[0].labeled().iter().map(|e| e.id.0.clone()).collect();
        assert_eq!(
            ids,
            ["e00", "e01", "e02", "e03", "e04"]
                .iter()
                .map(|s| s.to_string())
                .collect()
        );
    }

    #[test]
    fn missing_timestamp_is_ingestion_error() {
        let corpus = meta_corpus(2, 4, false);
        let cfg = StreamConfig {
            mode: StreamMode::TimeIncremental,
            num_tasks: 2,
            label_rate: 1.0,
            seed: 0,
            test_fraction: 0.0,
            sparsify_scope: SparsifyScope::PerClass,
            corpus_manifest: None,
        };
        assert!(matches!(
            build_time_incremental_stream(&corpus, &cfg).unwrap_err(),
            Error::Ingestion(_)
        ));
    }

    #[test]
    fn large_time_stream_chunk_arithmetic() {
        // 581,100 examples over 20 tasks: 29,055 per chunk exactly.
        let n = 581_100u32;
        let mut entries = Vec::with_capacity(n as usize);
        for i in 0..n {
            entries.push(ManifestEntry {
                id: ExampleId(format!("e{i:06}")),
                path: String::new(),
                class: i % 97,
                timestamp: Some((i % 1000) as f64),
            });
        }
        let corpus = Corpus::metadata_only(ImageShape::new(2, 2, 1), 97, entries).unwrap();
        let cfg = StreamConfig {
            mode: StreamMode::TimeIncremental,
            num_tasks: 20,
            label_rate: 1.0,
            seed: 1,
            test_fraction: 0.0,
            sparsify_scope: SparsifyScope::PerClass,
            corpus_manifest: None,
        };
        let tasks = build_time_incremental_stream(&corpus, &cfg).unwrap();
        assert!(tasks.iter().all(|t| t.total_train() == 29_055));
    }

    fn full_task(per_class: &[usize]) -> StreamTask {
        let mut labeled = Vec::new();
        let mut classes = BTreeSet::new();
        for (c, &n) in per_class.iter().enumerate() {
            classes.insert(c as ClassId);
            for i in 0..n {
                labeled.push(StreamExample {
                    id: ExampleId(format!("c{c:02}e{i:05}")),
                    label: Some(c as ClassId),
                    timestamp: None,
                });
            }
        }
        StreamTask::from_parts(0, labeled, Vec::new(), Vec::new(), classes, BTreeMap::new())
            .unwrap()
    }

    #[test]
    fn sparsify_ceiling_counts() {
        let task = full_task(&[200]);
        let sparse = sparsify_labels(&task, 0.01, 9).unwrap();
        assert_eq!(sparse.labeled().len(), 2);
        assert_eq!(sparse.unlabeled().len(), 198);
        assert_eq!(sparse.total_train(), 200);
    }

    #[test]
    fn sparsify_rate_one_keeps_everything() {
        let task = full_task(&[7, 5]);
        let sparse = sparsify_labels(&task, 1.0, 9).unwrap();
        assert_eq!(sparse.labeled().len(), 12);
        assert!(sparse.unlabeled().is_empty());
        let before: BTreeSet<_> = task.labeled().iter().map(|e| e.id.clone()).collect();
        let after: BTreeSet<_> = sparse.labeled().iter().map(|e| e.id.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn sparsify_no_float_excess_on_exact_rates() {
        let task = full_task(&[300]);
        let sparse = sparsify_labels(&task, 0.1, 9).unwrap();
        assert_eq!(sparse.labeled().len(), 30);
    }

    #[test]
    fn large_task_one_percent_gives_five_thousand() {
        // 100 classes x 5,000 examples at 1%: exactly 50 per class, 5k total.
        let task = full_task(&vec![5000; 100]);
        let sparse = sparsify_labels(&task, 0.01, 11).unwrap();
        assert_eq!(sparse.labeled().len(), 5000);
    }

    #[test]
    fn sparsify_idempotent_and_nested() {
        let task = full_task(&[37, 11, 64]);
        let once = sparsify_labels(&task, 0.2, 5).unwrap();
        let twice = sparsify_labels(&once, 0.2, 5).unwrap();
        assert_eq!(once, twice);

        let low = sparsify_labels(&task, 0.1, 5).unwrap();
        let high = sparsify_labels(&task, 0.5, 5).unwrap();
        let low_ids: BTreeSet<_> = low.labeled().iter().map(|e| e.id.clone()).collect();
        let high_ids: BTreeSet<_> = high.labeled().iter().map(|e| e.id.clone()).collect();
        assert!(low_ids.is_subset(&high_ids));
    }

    #[test]
    fn sparsify_rejects_bad_rates() {
        let task = full_task(&[4]);
        assert!(matches!(
            sparsify_labels(&task, 0.0, 1).unwrap_err(),
            Error::Config(_)
        ));
        assert!(matches!(
            sparsify_labels(&task, 1.5, 1).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn snapshot_roundtrip_is_bit_exact() {
        let corpus = meta_corpus(8, 10, false);
        let cfg = ci_cfg(4, 0.3);
        let tasks = build_class_incremental_stream(&corpus, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_stream_snapshot(dir.path(), &cfg, &tasks).unwrap();
        let (loaded_cfg, loaded) = load_stream_snapshot(dir.path(), &corpus).unwrap();
        assert_eq!(loaded_cfg.num_tasks, cfg.num_tasks);
        assert_eq!(tasks, loaded);
    }

    #[test]
    fn holdout_splits_test_before_streaming() {
        let corpus = meta_corpus(4, 20, false);
        let mut cfg = ci_cfg(2, 1.0);
        cfg.test_fraction = 0.1;
        let tasks = build_class_incremental_stream(&corpus, &cfg).unwrap();
        for t in &tasks {
            // 2 classes x 20 examples, 10% held out: 2 test, 36 train.
            assert_eq!(t.test().len(), 4);
            assert_eq!(t.total_train(), 36);
            let train_ids: HashSet<_> = t.labeled().iter().map(|e| &e.id).collect();
            assert!(t.test().iter().all(|e| !train_ids.contains(&e.id)));
        }
    }
}
