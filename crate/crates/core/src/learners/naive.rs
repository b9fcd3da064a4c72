//! Lower-bound baseline: plain NLL training on each task in turn. Exhibits
//! catastrophic forgetting by construction.

use super::trainer::{train_deterministic, BatchRule, MlTrainOptions};
use super::{finish_prediction, head_for, localize_labels, localize_to_global, EvalView, Learner, Method, MiProbe, TaskReport};
use crate::data::{HeadMode, TaskDataset};
use crate::error::{Error, Result};
use crate::models::{HeadLayout, Mlp, MlpConfig};
use crate::rng;
use crate::tensor::{softmax_rows, OptimizerConfig, Tensor};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NaiveConfig {
    pub epochs: usize,
    pub batch: BatchRule,
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NaiveLearner {
    cfg: NaiveConfig,
    arch: MlpConfig,
    layout: Option<HeadLayout>,
    num_global_classes: usize,
    mlp: Option<Mlp>,
    tasks_trained: u32,
}

impl NaiveLearner {
    pub fn new(arch: MlpConfig, cfg: NaiveConfig, layout: Option<HeadLayout>, num_global_classes: usize) -> Self {
        NaiveLearner { cfg, arch, layout, num_global_classes, mlp: None, tasks_trained: 0 }
    }

    fn model(&self) -> Result<&Mlp> {
        self.mlp.as_ref().ok_or_else(|| Error::state("no task trained yet"))
    }
}

impl Learner for NaiveLearner {
    fn method(&self) -> Method {
        Method::Naive
    }

    fn train_task(&mut self, task: &TaskDataset, seed: u64, _probe: Option<&mut MiProbe>) -> Result<TaskReport> {
        let start = Instant::now();
        let mut init_rng = rng::stream(seed, "naive-init", u64::from(task.task_id));
        if self.mlp.is_none() {
            self.mlp = Some(Mlp::init(self.arch.clone(), &mut init_rng)?);
        }
        let head = head_for(self.arch.head_mode, self.layout.as_ref(), task.task_id)?;
        let mlp = self.mlp.as_mut().unwrap();
        if let Some(h) = head {
            mlp.ensure_head(h, &mut init_rng);
        }

        let (labels, k_out) = match self.arch.head_mode {
            HeadMode::Multi => (localize_labels(task.train.labels(), &task.class_set)?, task.class_set.len()),
            _ => (task.train.labels().to_vec(), self.num_global_classes),
        };
        let opts = MlTrainOptions {
            epochs: self.cfg.epochs,
            batch: self.cfg.batch,
            optimizer: self.cfg.optimizer,
            penalty: None,
        };
        let mut rng = rng::stream(seed, "naive-train", u64::from(task.task_id));
        train_deterministic(mlp, task.train.inputs(), &labels, k_out, head, &opts, &mut rng)?;
        self.tasks_trained = self.tasks_trained.max(task.task_id);
        Ok(TaskReport { train_seconds: start.elapsed().as_secs_f64(), gan_seconds: 0.0 })
    }

    fn predict(&self, x: &Tensor, view: EvalView, _seed: u64) -> Result<Tensor> {
        let mlp = self.model()?;
        match view {
            EvalView::MultiHead { task_id } => {
                let layout = self.layout.as_ref().ok_or_else(|| Error::config("multi view without layout"))?;
                let head = layout.head_for_task(task_id)?;
                let probs = softmax_rows(&mlp.logits(x, Some(head))?)?;
                localize_to_global(&probs, layout.classes_of_head(head)?, self.num_global_classes)
            }
            _ => {
                let probs = softmax_rows(&mlp.logits(x, None)?)?;
                finish_prediction(probs, view)
            }
        }
    }

    fn mutual_info(&self, _x: &Tensor, _s: usize, _seed: u64) -> Result<f64> {
        Err(Error::config("naive baseline has no weight posterior"))
    }

    fn tasks_trained(&self) -> u32 {
        self.tasks_trained
    }
}
