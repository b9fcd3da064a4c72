//! Greedy k-center (farthest-first) coreset selection and cross-task storage.

use crate::data::{LabelledSet, TaskDataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Rows withheld from one task's training split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoresetEntry {
    pub task_id: u32,
    pub dim: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl CoresetEntry {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// All withheld rows seen so far, one entry per task.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Coreset {
    pub capacity_per_task: usize,
    entries: Vec<CoresetEntry>,
}

impl Coreset {
    pub fn new(capacity_per_task: usize) -> Self {
        Coreset { capacity_per_task, entries: Vec::new() }
    }

    /// Insert an entry, replacing any previous entry for the same task.
    pub fn upsert(&mut self, entry: CoresetEntry) {
        if let Some(slot) = self.entries.iter_mut().find(|e| e.task_id == entry.task_id) {
            *slot = entry;
        } else {
            self.entries.push(entry);
        }
    }

    pub fn entries(&self) -> &[CoresetEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    /// Concatenate all entries into one labelled set (global labels).
    pub fn as_labelled_set(&self, num_classes: usize) -> Result<Option<LabelledSet>> {
        if self.is_empty() {
            return Ok(None);
        }
        let dim = self.entries.iter().find(|e| !e.is_empty()).unwrap().dim;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for e in &self.entries {
            if e.dim != dim && !e.is_empty() {
                return Err(Error::dim("coreset entries disagree on input dim"));
            }
            inputs.extend_from_slice(&e.inputs);
            labels.extend_from_slice(&e.labels);
        }
        let n = labels.len();
        Ok(Some(LabelledSet::new(Tensor::new(vec![n, dim], inputs)?, labels, num_classes)?))
    }

    /// One labelled set per stored task, in insertion order.
    pub fn per_task_sets(&self, num_classes: usize) -> Result<Vec<(u32, LabelledSet)>> {
        let mut out = Vec::new();
        for e in &self.entries {
            if e.is_empty() {
                continue;
            }
            let n = e.len();
            out.push((
                e.task_id,
                LabelledSet::new(Tensor::new(vec![n, e.dim], e.inputs.clone())?, e.labels.clone(), num_classes)?,
            ));
        }
        Ok(out)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy farthest-first traversal from a fixed start index.
pub fn k_center_select_from(inputs: &Tensor, k: usize, first: usize) -> Result<Vec<usize>> {
    let (n, _) = inputs.dims2()?;
    if first >= n {
        return Err(Error::config(format!("start index {first} out of {n} rows")));
    }
    let k = k.min(n);
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_sq = vec![f64::INFINITY; n];
    let mut current = first;
    for _ in 0..k {
        selected.push(current);
        let c = inputs.row(current);
        let mut far = 0;
        let mut far_d = -1.0;
        for j in 0..n {
            let d = sq_dist(inputs.row(j), c);
            if d < min_sq[j] {
                min_sq[j] = d;
            }
            if min_sq[j] > far_d {
                far_d = min_sq[j];
                far = j;
            }
        }
        current = far;
    }
    Ok(selected)
}

/// Greedy k-center selection; the first point is seeded-uniform, every next
/// point maximizes Euclidean distance to the nearest already-selected point.
/// `k > n` selects all n rows.
pub fn k_center_select(inputs: &Tensor, k: usize, seed: u64) -> Result<Vec<usize>> {
    let (n, _) = inputs.dims2()?;
    let first = rng::stream(seed, "k-center-start", 0).random_range(0..n);
    k_center_select_from(inputs, k, first)
}

/// Move `k` k-center rows out of the task's training split. The test split is
/// untouched. The split invariants require a non-empty remainder.
pub fn extract_coreset(task: &TaskDataset, k: usize, seed: u64) -> Result<(CoresetEntry, TaskDataset)> {
    let n = task.train.len();
    if k == 0 {
        return Ok((
            CoresetEntry { task_id: task.task_id, dim: task.train.dim(), inputs: Vec::new(), labels: Vec::new() },
            task.clone(),
        ));
    }
    if k >= n {
        return Err(Error::config(format!(
            "coreset of {k} rows would consume the whole {n}-row training split of task {}",
            task.task_id
        )));
    }
    let picked = k_center_select(task.train.inputs(), k, seed)?;
    let mut is_picked = vec![false; n];
    for &i in &picked {
        is_picked[i] = true;
    }
    let rest: Vec<usize> = (0..n).filter(|&i| !is_picked[i]).collect();

    let withheld = task.train.select(&picked)?;
    let entry = CoresetEntry {
        task_id: task.task_id,
        dim: task.train.dim(),
        inputs: withheld.inputs().data().to_vec(),
        labels: withheld.labels().to_vec(),
    };
    let reduced = TaskDataset::new(
        task.train.select(&rest)?,
        task.test.clone(),
        task.task_id,
        task.class_set.clone(),
    )?;
    Ok((entry, reduced))
}
