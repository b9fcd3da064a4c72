//! Task-stream builders: pixel-permuted and class-split protocols, plus the
//! test-time masking helper.

use super::{HeadMode, LabelledSet, TaskDataset, TaskStream};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// A bijection on input coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Permutation {
    perm: Vec<usize>,
}

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let d = perm.len();
        let mut seen = vec![false; d];
        for &p in &perm {
            if p >= d || seen[p] {
                return Err(Error::config("Permutation: not a bijection"));
            }
            seen[p] = true;
        }
        Ok(Permutation { perm })
    }

    pub fn identity(d: usize) -> Self {
        Permutation { perm: (0..d).collect() }
    }

    pub fn random(d: usize, rng: &mut impl rand::Rng) -> Self {
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(rng);
        Permutation { perm }
    }

    pub fn indices(&self) -> &[usize] {
        &self.perm
    }

    /// Permute the columns of every row: out[j] = in[perm[j]].
    pub fn apply(&self, set: &LabelledSet) -> Result<LabelledSet> {
        let (n, d) = set.inputs().dims2()?;
        if d != self.perm.len() {
            return Err(Error::dim(format!(
                "Permutation of {} coords applied to dim {d}",
                self.perm.len()
            )));
        }
        let src = set.inputs().data();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let out = &mut data[i * d..(i + 1) * d];
            for (j, &p) in self.perm.iter().enumerate() {
                out[j] = row[p];
            }
        }
        LabelledSet::new(
            Tensor::new(vec![n, d], data)?,
            set.labels().to_vec(),
            set.num_classes(),
        )
    }
}

/// Task 1 is the unpermuted base; tasks 2..T draw fresh seeded permutations,
/// applied identically to train and test.
pub fn build_permuted_stream(
    train: &LabelledSet,
    test: &LabelledSet,
    t: usize,
    seed: u64,
) -> Result<TaskStream> {
    if t < 1 {
        return Err(Error::config("permuted stream needs T >= 1"));
    }
    let k = train.num_classes();
    let all_classes: Vec<usize> = (0..k).collect();
    let d = train.dim();
    let mut tasks = Vec::with_capacity(t);
    for task_id in 1..=t {
        let perm = if task_id == 1 {
            Permutation::identity(d)
        } else {
            let mut rng = rng::stream(seed, "permutation", task_id as u64);
            Permutation::random(d, &mut rng)
        };
        tasks.push(TaskDataset::new(
            perm.apply(train)?,
            perm.apply(test)?,
            task_id as u32,
            all_classes.clone(),
        )?);
    }
    TaskStream::new(tasks, HeadMode::Single, k)
}

/// The canonical pairing (0,1), (2,3), ... over `k` classes.
pub fn default_split_pairs(k: usize) -> Vec<Vec<usize>> {
    (0..k / 2).map(|i| vec![2 * i, 2 * i + 1]).collect()
}

/// One task per class tuple, each containing exactly those classes.
pub fn build_split_stream(
    train: &LabelledSet,
    test: &LabelledSet,
    pairs: &[Vec<usize>],
    head_mode: HeadMode,
) -> Result<TaskStream> {
    if pairs.is_empty() {
        return Err(Error::config("split stream needs at least one class tuple"));
    }
    let mut seen = std::collections::HashSet::new();
    for pair in pairs {
        for &c in pair {
            if !seen.insert(c) {
                return Err(Error::config(format!("split pairs overlap on class {c}")));
            }
        }
    }
    let k = train.num_classes();
    let mut tasks = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let train_rows = train.indices_of_classes(pair);
        let test_rows = test.indices_of_classes(pair);
        tasks.push(TaskDataset::new(
            train.select(&train_rows)?,
            test.select(&test_rows)?,
            (i + 1) as u32,
            pair.clone(),
        )?);
    }
    TaskStream::new(tasks, head_mode, k)
}

/// Zero the probabilities of classes outside `class_set`. No renormalization:
/// the result feeds an argmax only.
pub fn apply_head_mask(probs: &Tensor, class_set: &[usize]) -> Result<Tensor> {
    if class_set.is_empty() {
        return Err(Error::config("apply_head_mask: empty class_set"));
    }
    let (n, k) = probs.dims2()?;
    if let Some(bad) = class_set.iter().find(|&&c| c >= k) {
        return Err(Error::config(format!("apply_head_mask: class {bad} out of range {k}")));
    }
    let mut out = probs.clone();
    for i in 0..n {
        for j in 0..k {
            if !class_set.contains(&j) {
                out.data_mut()[i * k + j] = 0.0;
            }
        }
    }
    Ok(out)
}
