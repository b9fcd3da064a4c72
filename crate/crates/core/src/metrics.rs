//! Accuracy matrices, predictive entropy, mutual information, task-boundary
//! detection and the seen/unseen rank AUC.

use crate::error::{Error, Result};
use crate::models::BayesMlp;
use crate::tensor::{argmax, Tensor};
use serde::{Deserialize, Serialize};

/// Mean over rows of the Shannon entropy (nats) of each probability row.
/// Rows are expected to sum to 1; 0 * ln 0 counts as 0.
pub fn predictive_entropy(probs: &Tensor) -> Result<f64> {
    let (n, k) = probs.dims2()?;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..k {
            let p = probs.data()[i * k + j];
            if p < 0.0 {
                return Err(Error::numeric(format!("negative probability {p} at ({i}, {j})")));
            }
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    Ok(total / n as f64)
}

/// Epistemic mutual information from per-draw predictive distributions:
/// H(mean over draws) - mean over draws of H, averaged over rows and clamped
/// at zero.
pub fn mi_from_prob_draws(draws: &[Tensor]) -> Result<f64> {
    if draws.len() < 2 {
        return Err(Error::config("mutual information needs at least 2 draws"));
    }
    let (n, k) = draws[0].dims2()?;
    let s = draws.len() as f64;
    let mut mean = vec![0.0; n * k];
    let mut mean_entropy = 0.0;
    for d in draws {
        if d.shape() != draws[0].shape() {
            return Err(Error::dim("draws disagree on shape"));
        }
        mean_entropy += predictive_entropy(d)?;
        for (m, v) in mean.iter_mut().zip(d.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= s);
    mean_entropy /= s;
    let entropy_of_mean = predictive_entropy(&Tensor::new(vec![n, k], mean)?)?;
    Ok((entropy_of_mean - mean_entropy).max(0.0))
}

/// Mutual information between predictions on `x` and the model posterior,
/// estimated with `s` posterior draws.
pub fn mutual_information(model: &BayesMlp, x: &Tensor, head: Option<usize>, s: usize, seed: u64) -> Result<f64> {
    if s < 2 {
        return Err(Error::config("mutual information needs s >= 2"));
    }
    let draws = model.prob_draws(x, head, s, seed)?;
    mi_from_prob_draws(&draws)
}

/// Divide by the maximum ("1 for the most uncertain task"); all-zero input
/// maps to zeros.
pub fn normalize_mi_profile(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| v / max).collect()
}

/// One per-batch mutual-information reading taken during training.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MiPoint {
    pub global_batch: usize,
    pub task_id: u32,
    pub mi: f64,
}

/// The MI readings of one training run, in batch order.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct UncertaintyTrace {
    pub points: Vec<MiPoint>,
}

impl UncertaintyTrace {
    pub fn push(&mut self, global_batch: usize, task_id: u32, mi: f64) {
        self.points.push(MiPoint { global_batch, task_id, mi });
    }

    /// Global batch indices where a task other than the first begins.
    pub fn true_boundaries(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev_task = None;
        for p in &self.points {
            if let Some(prev) = prev_task {
                if p.task_id != prev {
                    out.push(p.global_batch);
                }
            }
            prev_task = Some(p.task_id);
        }
        out
    }
}

/// Flag a batch when its MI exceeds `threshold_factor` times the running
/// average of the current segment, after `warmup` batches have accumulated.
/// Each flag resets the running average.
pub fn detect_boundaries(trace: &UncertaintyTrace, threshold_factor: f64, warmup: usize) -> Result<Vec<usize>> {
    if !(threshold_factor > 1.0) {
        return Err(Error::config(format!(
            "threshold_factor must exceed 1, got {threshold_factor}"
        )));
    }
    let mut flags = Vec::new();
    let mut count = 0usize;
    let mut mean = 0.0f64;
    for p in &trace.points {
        if count >= warmup && p.mi > threshold_factor * mean {
            flags.push(p.global_batch);
            count = 0;
            mean = 0.0;
            continue;
        }
        count += 1;
        mean += (p.mi - mean) / count as f64;
    }
    Ok(flags)
}

/// Rank AUC: probability that an unseen task carries higher MI than a seen
/// one, ties counting one half.
pub fn seen_unseen_auc(mi_values: &[f64], seen: &[bool]) -> Result<f64> {
    if mi_values.len() != seen.len() {
        return Err(Error::dim("seen_unseen_auc: length mismatch"));
    }
    let pos: Vec<f64> = mi_values
        .iter()
        .zip(seen)
        .filter(|(_, s)| !**s)
        .map(|(v, _)| *v)
        .collect();
    let neg: Vec<f64> = mi_values
        .iter()
        .zip(seen)
        .filter(|(_, s)| **s)
        .map(|(v, _)| *v)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::config("seen_unseen_auc: need at least one seen and one unseen value"));
    }
    let mut score = 0.0;
    for p in &pos {
        for n in &neg {
            score += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(score / (pos.len() * neg.len()) as f64)
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy_top1(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = probs.dims2()?;
    if n != labels.len() {
        return Err(Error::dim("accuracy: row/label count mismatch"));
    }
    let hits = (0..n).filter(|&i| argmax(probs.row(i)) == labels[i]).count();
    Ok(hits as f64 / n as f64)
}

/// A[t][i]: accuracy of the model after task t on the test set of task i.
/// Entries with i > t may be present for seen/unseen probes.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<Option<f64>>>,
    pub test_sizes: Vec<usize>,
}

impl AccuracyMatrix {
    pub fn push_row(&mut self, row: Vec<Option<f64>>) {
        self.rows.push(row);
    }

    /// Average accuracy over tasks 1..=t after training task t (0-based row).
    pub fn average_after(&self, row: usize) -> Option<f64> {
        let r = self.rows.get(row)?;
        let upto = (row + 1).min(r.len());
        let vals: Vec<f64> = r[..upto].iter().flatten().copied().collect();
        if vals.is_empty() {
            return None;
        }
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Average accuracy over all tasks after the final task.
    pub fn final_average(&self) -> Option<f64> {
        self.average_after(self.rows.len().checked_sub(1)?)
    }

    pub fn entry(&self, after_task: usize, eval_task: usize) -> Option<f64> {
        *self.rows.get(after_task)?.get(eval_task)?
    }
}
