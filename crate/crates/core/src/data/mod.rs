//! Dataset ingestion and task-stream construction.

mod blobs;
mod idx;
mod stream;

pub use blobs::{blob_center, synth_blobs, synth_blobs_split, BLOBS_LATENT_DIM};
pub use idx::{load_idx, load_idx_dir, write_idx};
pub use stream::{
    apply_head_mask, build_permuted_stream, build_split_stream, default_split_pairs, Permutation,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// How output heads are arranged across tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One shared output layer over all global classes.
    Single,
    /// One output layer per task, trained separately.
    Multi,
    /// Trained exactly like `Single`; at test time, outputs outside the task's
    /// classes are zeroed before the argmax.
    MaskedSingle,
}

/// A labelled design matrix: inputs in [0,1], integer labels below `num_classes`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelledSet {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelledSet {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _) = inputs.dims2()?;
        if n == 0 {
            return Err(Error::dim("LabelledSet: empty"));
        }
        if labels.len() != n {
            return Err(Error::dim(format!(
                "LabelledSet: {n} rows vs {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::dim(format!(
                "LabelledSet: label {bad} out of range for {num_classes} classes"
            )));
        }
        if !inputs.all_finite() {
            return Err(Error::Numeric("LabelledSet: non-finite input".into()));
        }
        Ok(LabelledSet { inputs, labels, num_classes })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn with_num_classes(mut self, k: usize) -> Result<Self> {
        if self.labels.iter().any(|&l| l >= k) {
            return Err(Error::dim(format!("labels exceed requested class count {k}")));
        }
        self.num_classes = k;
        Ok(self)
    }

    pub fn select(&self, idx: &[usize]) -> Result<LabelledSet> {
        let inputs = self.inputs.select_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        LabelledSet::new(inputs, labels, self.num_classes)
    }

    /// Row indices whose label is in `classes`.
    pub fn indices_of_classes(&self, classes: &[usize]) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect()
    }

    /// Keep at most `cap` rows of every class, chosen by seeded shuffle.
    pub fn cap_per_class(&self, cap: usize, seed: u64) -> Result<LabelledSet> {
        let mut rng = crate::rng::stream(seed, "cap-per-class", 0);
        let mut keep = Vec::new();
        for class in 0..self.num_classes {
            let mut idx: Vec<usize> = self
                .labels
                .iter()
                .enumerate()
                .filter(|(_, l)| **l == class)
                .map(|(i, _)| i)
                .collect();
            idx.shuffle(&mut rng);
            idx.truncate(cap);
            keep.extend(idx);
        }
        keep.sort_unstable();
        self.select(&keep)
    }

    /// Concatenate two sets over the same input dimension and class space.
    pub fn concat(&self, other: &LabelledSet) -> Result<LabelledSet> {
        if self.num_classes != other.num_classes {
            return Err(Error::dim("concat: class-count mismatch"));
        }
        let inputs = self.inputs.vstack(&other.inputs)?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        LabelledSet::new(inputs, labels, self.num_classes)
    }
}

/// One task of a stream: its train and test splits plus class metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskDataset {
    pub train: LabelledSet,
    pub test: LabelledSet,
    pub task_id: u32,
    pub class_set: Vec<usize>,
}

impl TaskDataset {
    pub fn new(train: LabelledSet, test: LabelledSet, task_id: u32, class_set: Vec<usize>) -> Result<Self> {
        if task_id == 0 {
            return Err(Error::config("task_id starts at 1"));
        }
        if class_set.is_empty() {
            return Err(Error::config("class_set must be non-empty"));
        }
        let mut sorted = class_set.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != class_set.len() {
            return Err(Error::config("class_set contains duplicates"));
        }
        for set in [&train, &test] {
            if let Some(bad) = set.labels().iter().find(|l| !sorted.contains(l)) {
                return Err(Error::config(format!(
                    "task {task_id}: label {bad} outside class_set {sorted:?}"
                )));
            }
        }
        Ok(TaskDataset { train, test, task_id, class_set: sorted })
    }
}

/// The five evaluation desiderata.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Desideratum {
    /// A: inputs of later tasks resemble earlier tasks.
    CrossTaskResemblance,
    /// B: one output head shared across tasks.
    SharedOutputHead,
    /// C: no task labels available at test time.
    NoTestTimeTaskLabels,
    /// D: no unconstrained retraining on old tasks.
    NoRetraining,
    /// E: more than two tasks.
    MoreThanTwoTasks,
}

impl Desideratum {
    pub fn letter(&self) -> char {
        match self {
            Desideratum::CrossTaskResemblance => 'A',
            Desideratum::SharedOutputHead => 'B',
            Desideratum::NoTestTimeTaskLabels => 'C',
            Desideratum::NoRetraining => 'D',
            Desideratum::MoreThanTwoTasks => 'E',
        }
    }
}

/// An ordered sequence of disjoint labelled tasks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskDataset>,
    pub head_mode: HeadMode,
    pub num_global_classes: usize,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskDataset>, head_mode: HeadMode, num_global_classes: usize) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::config("TaskStream: no tasks"));
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.task_id != (i + 1) as u32 {
                return Err(Error::config(format!(
                    "TaskStream: task_ids must be consecutive from 1, got {} at {}",
                    t.task_id, i
                )));
            }
            if t.class_set.iter().any(|&c| c >= num_global_classes) {
                return Err(Error::config("TaskStream: class outside global class space"));
            }
        }
        Ok(TaskStream { tasks, head_mode, num_global_classes })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// True when every task carries the full global class set: the permuted
    /// construction, whose inputs by design do not resemble earlier tasks.
    pub fn is_permuted_style(&self) -> bool {
        self.len() > 1
            && self
                .tasks
                .iter()
                .all(|t| t.class_set.len() == self.num_global_classes)
    }

    /// Desiderata violated by this stream's construction. Retraining is a
    /// property of the experiment loop, not the stream, and is passed in.
    pub fn desiderata_violations(&self, retraining: bool) -> Vec<Desideratum> {
        let mut v = Vec::new();
        if self.is_permuted_style() {
            v.push(Desideratum::CrossTaskResemblance);
        }
        if self.head_mode == HeadMode::Multi {
            v.push(Desideratum::SharedOutputHead);
        }
        if matches!(self.head_mode, HeadMode::Multi | HeadMode::MaskedSingle) {
            v.push(Desideratum::NoTestTimeTaskLabels);
        }
        if retraining {
            v.push(Desideratum::NoRetraining);
        }
        if self.len() <= 2 {
            v.push(Desideratum::MoreThanTwoTasks);
        }
        v
    }
}
