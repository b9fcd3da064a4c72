//! Deterministic and mean-field Bayesian MLPs with configurable head modes.

mod bayes;
mod mlp;

pub use bayes::{kl_diag_gaussian, BayesMlp, GaussianPosterior, PosteriorLayer};
pub use mlp::Mlp;

use crate::data::{HeadMode, TaskStream};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
}

/// Architecture of an MLP: `layer_sizes` runs input, hidden..., output width.
/// In `Multi` head mode the output width is the per-head class count and
/// `heads` is the number of tasks; otherwise `heads` is 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpConfig {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub head_mode: HeadMode,
    pub heads: usize,
}

impl MlpConfig {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, head_mode: HeadMode, heads: usize) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::config("MlpConfig: need at least one hidden layer"));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::config("MlpConfig: zero-width layer"));
        }
        if head_mode == HeadMode::Multi && heads == 0 {
            return Err(Error::config("MlpConfig: multi mode needs at least one head"));
        }
        Ok(MlpConfig { layer_sizes, activation, head_mode, heads })
    }

    pub fn single_head(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        Self::new(layer_sizes, activation, HeadMode::Single, 1)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Widths of the trunk: everything but the final layer.
    pub(crate) fn trunk_sizes(&self) -> &[usize] {
        &self.layer_sizes[..self.layer_sizes.len() - 1]
    }
}

/// Maps task ids to heads and local class indices in multi-head mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadLayout {
    entries: Vec<HeadEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct HeadEntry {
    task_id: u32,
    head: usize,
    classes: Vec<usize>,
}

impl HeadLayout {
    pub fn from_stream(stream: &TaskStream) -> Self {
        let entries = stream
            .tasks
            .iter()
            .map(|t| HeadEntry {
                task_id: t.task_id,
                head: (t.task_id - 1) as usize,
                classes: t.class_set.clone(),
            })
            .collect();
        HeadLayout { entries }
    }

    pub fn head_for_task(&self, task_id: u32) -> Result<usize> {
        self.entries
            .iter()
            .find(|e| e.task_id == task_id)
            .map(|e| e.head)
            .ok_or_else(|| Error::config(format!("no head for task {task_id}")))
    }

    /// Global class indices of a head, in local order.
    pub fn classes_of_head(&self, head: usize) -> Result<&[usize]> {
        self.entries
            .iter()
            .find(|e| e.head == head)
            .map(|e| e.classes.as_slice())
            .ok_or_else(|| Error::config(format!("no such head {head}")))
    }

    pub fn local_of_global(&self, head: usize, global: usize) -> Result<usize> {
        self.classes_of_head(head)?
            .iter()
            .position(|&c| c == global)
            .ok_or_else(|| Error::config(format!("class {global} not in head {head}")))
    }
}
