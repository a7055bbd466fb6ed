//! Labeled replay stores: the task-balanced buffer and the reservoir
//! variant used by experience replay.
//!
//! Both stores hold (id, label, origin task) triples and re-read pixels from
//! the corpus at batch time, so memory stays flat regardless of image size.
//! The balanced buffer is unbounded by design — it keeps every labeled
//! example ever revealed — while the reservoir supports an optional capacity.

use crate::corpus::{ClassId, ExampleId};
use crate::error::{Error, Result};
use crate::stream::StreamTask;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One stored labeled example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferItem {
    pub id: ExampleId,
    pub class: ClassId,
    pub task: usize,
}

/// Unbounded task-keyed store of every labeled example seen so far.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BalancedBuffer {
    per_task: BTreeMap<usize, Vec<BufferItem>>,
}

impl BalancedBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert all labeled examples of a task under its index. A task may be
    /// inserted once; re-insertion is a contract violation.
    pub fn update_balanced(&mut self, task: &StreamTask) -> Result<usize> {
        if self.per_task.contains_key(&task.index()) {
            return Err(Error::Contract(format!(
                "task {} already inserted into balanced buffer",
                task.index()
            )));
        }
        let items: Vec<BufferItem> = task
            .labeled()
            .iter()
            .map(|e| BufferItem {
                id: e.id.clone(),
                class: e.label.expect("labeled examples carry labels"),
                task: task.index(),
            })
            .collect();
        let n = items.len();
        self.per_task.insert(task.index(), items);
        Ok(n)
    }

    pub fn len(&self) -> usize {
        self.per_task.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_count(&self) -> usize {
        self.per_task.len()
    }

    pub fn per_task_sizes(&self) -> BTreeMap<usize, usize> {
        self.per_task.iter().map(|(t, v)| (*t, v.len())).collect()
    }

    /// Draw `batch` items spread evenly over nonempty tasks: tasks are
    /// visited round-robin in a shuffled order, so per-task draw counts
    /// differ by at most one. `exclude` drops one task from the pool (used
    /// by the current-task-exclusion ablation).
    pub fn sample_balanced(
        &self,
        batch: usize,
        rng: &mut ChaCha8Rng,
        exclude: Option<usize>,
    ) -> Result<Vec<BufferItem>> {
        let groups: Vec<&Vec<BufferItem>> = self
            .per_task
            .iter()
            .filter(|(t, v)| Some(**t) != exclude && !v.is_empty())
            .map(|(_, v)| v)
            .collect();
        balanced_draw(&groups, batch, rng)
    }

    /// Draw `batch` items uniformly over everything stored.
    pub fn sample_uniform(
        &self,
        batch: usize,
        rng: &mut ChaCha8Rng,
        exclude: Option<usize>,
    ) -> Result<Vec<BufferItem>> {
        let pool: Vec<&BufferItem> = self
            .per_task
            .iter()
            .filter(|(t, _)| Some(**t) != exclude)
            .flat_map(|(_, v)| v.iter())
            .collect();
        uniform_draw(&pool, batch, rng)
    }

    /// Per-task id lists for persistence.
    pub fn snapshot(&self) -> BTreeMap<usize, Vec<BufferItem>> {
        self.per_task.clone()
    }

    pub fn restore(per_task: BTreeMap<usize, Vec<BufferItem>>) -> Self {
        Self { per_task }
    }
}

/// Classic reservoir-sampled store. With no capacity it simply retains
/// every offer, which matches the storage assumption that the buffer can
/// hold all labeled data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReservoirBuffer {
    capacity: Option<usize>,
    slots: Vec<BufferItem>,
    seen: u64,
}

impl ReservoirBuffer {
    pub fn new(capacity: Option<usize>) -> Self {
        Self { capacity, slots: Vec::new(), seen: 0 }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn slots(&self) -> &[BufferItem] {
        &self.slots
    }

    /// Offer one labeled item; unlabeled offers are rejected. Algorithm R:
    /// below capacity every item is kept, afterwards item `n` replaces a
    /// random slot with probability `capacity / n`.
    pub fn offer(
        &mut self,
        id: &ExampleId,
        label: Option<ClassId>,
        task: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let class = label.ok_or_else(|| {
            Error::Contract(format!("reservoir rejects unlabeled example {id}"))
        })?;
        self.seen += 1;
        let item = BufferItem { id: id.clone(), class, task };
        match self.capacity {
            None => self.slots.push(item),
            Some(cap) => {
                if self.slots.len() < cap {
                    self.slots.push(item);
                } else if cap > 0 {
                    let j = rng.gen_range(0..self.seen);
                    if (j as usize) < cap {
                        self.slots[j as usize] = item;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn sample_uniform(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BufferItem>> {
        let pool: Vec<&BufferItem> = self.slots.iter().collect();
        uniform_draw(&pool, batch, rng)
    }

    /// Balanced draw across the origin tasks present in the slots.
    pub fn sample_balanced(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BufferItem>> {
        let mut by_task: BTreeMap<usize, Vec<BufferItem>> = BTreeMap::new();
        for item in &self.slots {
            by_task.entry(item.task).or_default().push(item.clone());
        }
        let groups: Vec<&Vec<BufferItem>> = by_task.values().collect();
        balanced_draw(&groups, batch, rng)
    }
}

fn uniform_draw(pool: &[&BufferItem], batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BufferItem>> {
    if pool.is_empty() {
        return Err(Error::Sampling("buffer is empty".into()));
    }
    if batch == 0 {
        return Err(Error::Sampling("batch must be >= 1".into()));
    }
    Ok((0..batch)
        .map(|_| pool[rng.gen_range(0..pool.len())].clone())
        .collect())
}

/// Round-robin quota split over groups: `batch / k` each plus one extra for
/// the first `batch % k` groups in a shuffled order. Within a group, draws
/// are distinct when the quota fits and fall back to replacement when the
/// group is smaller than its quota.
fn balanced_draw(
    groups: &[&Vec<BufferItem>],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BufferItem>> {
    if groups.is_empty() {
        return Err(Error::Sampling("buffer is empty".into()));
    }
    if batch == 0 {
        return Err(Error::Sampling("batch must be >= 1".into()));
    }
    let k = groups.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let base = batch / k;
    let extra = batch % k;
    let mut out = Vec::with_capacity(batch);
    for (pos, &g) in order.iter().enumerate() {
        let quota = base + usize::from(pos < extra);
        let group = groups[g];
        if quota == 0 {
            continue;
        }
        if quota <= group.len() {
            let chosen = rand::seq::index::sample(rng, group.len(), quota);
            out.extend(chosen.iter().map(|i| group[i].clone()));
        } else {
            for _ in 0..quota {
                out.push(group[rng.gen_range(0..group.len())].clone());
            }
        }
    }
    Ok(out)
}
