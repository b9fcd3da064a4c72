//! Elastic weight consolidation, single-penalty variant: one accumulated
//! diagonal Fisher and one anchor at the latest weights.

use super::trainer::{train_deterministic, BatchRule, MlTrainOptions, QuadPenalty};
use super::{finish_prediction, head_for, localize_labels, localize_to_global, one_hot, EvalView, Learner, Method, MiProbe, TaskReport};
use crate::data::{HeadMode, TaskDataset};
use crate::error::{Error, Result};
use crate::models::{HeadLayout, Mlp, MlpConfig};
use crate::rng;
use crate::tensor::{softmax_rows, Graph, OptimizerConfig, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EwcConfig {
    pub epochs: usize,
    pub batch: BatchRule,
    /// SGD learning rate.
    pub learning_rate: f64,
    /// Coefficient of the consolidation term.
    pub lambda: f64,
    /// Training points sampled for the Fisher estimate at the end of a task.
    pub fisher_samples: usize,
}

/// Running per-parameter Fisher sums and the current anchor, keyed by
/// parameter name so the network may grow heads.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FisherDiagonal {
    entries: Vec<(String, Tensor, Tensor)>, // (name, fisher_sum, anchor)
}

impl FisherDiagonal {
    pub fn find(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, f, a)| (f, a))
    }

    /// (name, fisher_sum, anchor) triples in registration order.
    pub fn entries(&self) -> &[(String, Tensor, Tensor)] {
        &self.entries
    }

    /// Add a task's Fisher estimate into the running sums and re-anchor at the
    /// given weights. Fisher entries are non-negative, so the sums never
    /// decrease element-wise.
    fn accumulate(&mut self, name: &str, fisher: &Tensor, anchor: &Tensor) {
        match self.entries.iter_mut().find(|(n, _, _)| n == name) {
            Some((_, f, a)) => {
                for (dst, src) in f.data_mut().iter_mut().zip(fisher.data()) {
                    *dst += src;
                }
                *a = anchor.clone();
            }
            None => self.entries.push((name.to_string(), fisher.clone(), anchor.clone())),
        }
    }

    fn penalty(&self, lambda: f64) -> QuadPenalty {
        QuadPenalty {
            weight: lambda,
            terms: self.entries.iter().cloned().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EwcLearner {
    cfg: EwcConfig,
    arch: MlpConfig,
    layout: Option<HeadLayout>,
    num_global_classes: usize,
    mlp: Option<Mlp>,
    fisher: FisherDiagonal,
    tasks_trained: u32,
}

impl EwcLearner {
    pub fn new(arch: MlpConfig, cfg: EwcConfig, layout: Option<HeadLayout>, num_global_classes: usize) -> Result<Self> {
        if cfg.lambda < 0.0 {
            return Err(Error::config(format!("lambda must be non-negative, got {}", cfg.lambda)));
        }
        Ok(EwcLearner {
            cfg,
            arch,
            layout,
            num_global_classes,
            mlp: None,
            fisher: FisherDiagonal::default(),
            tasks_trained: 0,
        })
    }

    pub fn fisher(&self) -> &FisherDiagonal {
        &self.fisher
    }

    pub fn mlp(&self) -> Option<&Mlp> {
        self.mlp.as_ref()
    }

    fn model(&self) -> Result<&Mlp> {
        self.mlp.as_ref().ok_or_else(|| Error::state("no task trained yet"))
    }

    fn local_view(&self, task: &TaskDataset) -> Result<(Vec<usize>, usize)> {
        match self.arch.head_mode {
            HeadMode::Multi => Ok((
                localize_labels(task.train.labels(), &task.class_set)?,
                task.class_set.len(),
            )),
            _ => Ok((task.train.labels().to_vec(), self.num_global_classes)),
        }
    }

    /// Mean squared log-likelihood gradient over sampled training points:
    /// the diagonal empirical Fisher at the current weights.
    fn estimate_fisher(&self, task: &TaskDataset, head: Option<usize>, seed: u64) -> Result<Vec<(String, Tensor)>> {
        let mlp = self.model()?;
        let (labels, k_out) = self.local_view(task)?;
        let n = task.train.len();
        let mut rows: Vec<usize> = (0..n).collect();
        let mut rng = rng::stream(seed, "fisher-sample", u64::from(task.task_id));
        rows.shuffle(&mut rng);
        rows.truncate(self.cfg.fisher_samples.min(n));

        let mut sums: Vec<(String, Tensor)> = Vec::new();
        for &row in &rows {
            let x = task.train.inputs().select_rows(&[row])?;
            let target = one_hot(&labels[row..=row], k_out)?;
            let mut g = Graph::new();
            let xv = g.leaf(x);
            let (logits, bindings) = mlp.forward(&mut g, xv, head)?;
            // Mean NLL over one row equals -log p of that row, whose gradient
            // is the negated log-likelihood gradient; squaring removes the sign.
            let loss = g.softmax_cross_entropy(logits, &target)?;
            g.backward(loss)?;
            for (id, var) in &bindings {
                let name = mlp.params.name(*id).to_string();
                let grad = g.grad(*var);
                match sums.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, acc)) => {
                        for (a, gv) in acc.data_mut().iter_mut().zip(grad) {
                            *a += gv * gv;
                        }
                    }
                    None => {
                        let mut t = Tensor::zeros(mlp.params.value(*id).shape().to_vec());
                        for (a, gv) in t.data_mut().iter_mut().zip(grad) {
                            *a = gv * gv;
                        }
                        sums.push((name, t));
                    }
                }
            }
        }
        let count = rows.len().max(1) as f64;
        for (_, t) in sums.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v /= count);
        }
        Ok(sums)
    }
}

impl Learner for EwcLearner {
    fn method(&self) -> Method {
        Method::Ewc
    }

    fn train_task(&mut self, task: &TaskDataset, seed: u64, _probe: Option<&mut MiProbe>) -> Result<TaskReport> {
        let start = Instant::now();
        let mut init_rng = rng::stream(seed, "ewc-init", u64::from(task.task_id));
        if self.mlp.is_none() {
            self.mlp = Some(Mlp::init(self.arch.clone(), &mut init_rng)?);
        }
        let head = head_for(self.arch.head_mode, self.layout.as_ref(), task.task_id)?;
        if let Some(h) = head {
            self.mlp.as_mut().unwrap().ensure_head(h, &mut init_rng);
        }

        let (labels, k_out) = self.local_view(task)?;
        let penalty = self.fisher.penalty(self.cfg.lambda);
        let opts = MlTrainOptions {
            epochs: self.cfg.epochs,
            batch: self.cfg.batch,
            optimizer: OptimizerConfig::sgd(self.cfg.learning_rate),
            penalty: if self.fisher.is_empty() { None } else { Some(&penalty) },
        };
        let mut rng = rng::stream(seed, "ewc-train", u64::from(task.task_id));
        train_deterministic(
            self.mlp.as_mut().unwrap(),
            task.train.inputs(),
            &labels,
            k_out,
            head,
            &opts,
            &mut rng,
        )?;

        // Fisher at the converged weights; accumulate and re-anchor.
        let fisher_t = self.estimate_fisher(task, head, seed)?;
        let anchors: Vec<(String, Tensor)> = {
            let mlp = self.model()?;
            fisher_t
                .iter()
                .map(|(name, _)| {
                    let id = mlp.params.ids().find(|&id| mlp.params.name(id) == name).unwrap();
                    (name.clone(), mlp.params.value(id).clone())
                })
                .collect()
        };
        for ((name, fisher), (_, anchor)) in fisher_t.iter().zip(&anchors) {
            self.fisher.accumulate(name, fisher, anchor);
        }
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
        Err(Error::config("EWC has no weight posterior"))
    }

    fn tasks_trained(&self) -> u32 {
        self.tasks_trained
    }
}
