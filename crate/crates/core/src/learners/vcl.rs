//! Variational continual learning: the posterior at the end of each task is
//! the prior for the next. With a coreset, withheld rows fine-tune a clone of
//! the posterior before evaluation while the un-fine-tuned posterior
//! propagates as the next prior. The coreset-only ablation runs the same code
//! path with the KL always anchored at the initial prior.

use super::trainer::{train_bnn, train_deterministic, BatchRule, BnnTrainOptions, MiObservation, MlTrainOptions};
use super::{finish_prediction, head_for, localize_labels, localize_to_global, EvalView, Learner, Method, MiProbe, TaskReport};
use crate::coreset::{extract_coreset, Coreset};
use crate::data::{HeadMode, TaskDataset};
use crate::error::{Error, Result};
use crate::models::{BayesMlp, GaussianPosterior, HeadLayout, Mlp, MlpConfig};
use crate::rng;
use crate::tensor::{OptimizerConfig, Tensor};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// What the KL term is anchored to when training a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    /// The posterior left by the previous task (the VCL chain).
    PreviousPosterior,
    /// Always the initial unit-Gaussian prior (the coreset-only ablation).
    InitialPrior,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VclConfig {
    pub epochs: usize,
    pub batch: BatchRule,
    pub optimizer: OptimizerConfig,
    /// The constant multiplying the KL term (exposed for the upweighting probe).
    pub prior_weight: f64,
    pub init_var: f64,
    pub ml_init_epochs: usize,
    pub train_mc_samples: usize,
    pub eval_mc_samples: usize,
    /// Rows withheld per task; 0 disables the coreset entirely.
    pub coreset_size: usize,
    pub coreset_epochs: usize,
    pub prior_source: PriorSource,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VclLearner {
    cfg: VclConfig,
    arch: MlpConfig,
    layout: Option<HeadLayout>,
    num_global_classes: usize,
    bnn: Option<BayesMlp>,
    prior: GaussianPosterior,
    coreset: Coreset,
    eval_model: Option<BayesMlp>,
    tasks_trained: u32,
}

impl VclLearner {
    pub fn new(arch: MlpConfig, cfg: VclConfig, layout: Option<HeadLayout>, num_global_classes: usize) -> Self {
        let coreset = Coreset::new(cfg.coreset_size);
        VclLearner {
            cfg,
            arch,
            layout,
            num_global_classes,
            bnn: None,
            prior: GaussianPosterior::unit(),
            coreset,
            eval_model: None,
            tasks_trained: 0,
        }
    }

    /// The posterior snapshot propagated as the next task's prior.
    pub fn chained_prior(&self) -> &GaussianPosterior {
        &self.prior
    }

    pub fn posterior(&self) -> Option<GaussianPosterior> {
        self.bnn.as_ref().map(|b| b.posterior())
    }

    pub fn coreset(&self) -> &Coreset {
        &self.coreset
    }

    fn prediction_model(&self) -> Result<&BayesMlp> {
        self.eval_model
            .as_ref()
            .or(self.bnn.as_ref())
            .ok_or_else(|| Error::state("no task trained yet"))
    }

    fn kl_prior(&self) -> GaussianPosterior {
        match self.cfg.prior_source {
            PriorSource::PreviousPosterior => self.prior.clone(),
            PriorSource::InitialPrior => GaussianPosterior::unit(),
        }
    }

    /// Maximum-likelihood warm start: a deterministic fit whose weights become
    /// the posterior means, with a small shared initial variance.
    fn ml_initialize(&mut self, task: &TaskDataset, seed: u64) -> Result<()> {
        let mut init_rng = rng::stream(seed, "vcl-ml-init", u64::from(task.task_id));
        let mut ml = Mlp::init(self.arch.clone(), &mut init_rng)?;
        let head = head_for(self.arch.head_mode, self.layout.as_ref(), task.task_id)?;
        if let Some(h) = head {
            ml.ensure_head(h, &mut init_rng);
        }
        let (labels, k_out) = self.local_view(task)?;
        let opts = MlTrainOptions {
            epochs: self.cfg.ml_init_epochs,
            batch: self.cfg.batch,
            optimizer: self.cfg.optimizer,
            penalty: None,
        };
        train_deterministic(&mut ml, task.train.inputs(), &labels, k_out, head, &opts, &mut init_rng)?;
        self.bnn = Some(BayesMlp::from_ml(&ml, self.cfg.init_var)?);
        Ok(())
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

    /// Fine-tune a clone of the posterior on the concatenated coresets; the
    /// clone serves predictions, the main posterior serves the chain.
    fn coreset_finetune(&mut self, seed: u64, task_id: u32) -> Result<()> {
        if self.coreset.is_empty() {
            self.eval_model = None;
            return Ok(());
        }
        let mut tuned = self.bnn.as_ref().unwrap().clone();
        // Both variants anchor the fine-tune at the current posterior; the
        // prior source only changes what the main per-task training saw. That
        // is what makes the two methods coincide exactly after one task.
        let anchor = tuned.posterior();
        let mut rng = rng::stream(seed, "coreset-finetune", u64::from(task_id));
        match self.arch.head_mode {
            HeadMode::Multi => {
                // Train each head in turn, ascending task order.
                let layout = self.layout.as_ref().ok_or_else(|| Error::config("multi mode requires a head layout"))?;
                for (tid, set) in self.coreset.per_task_sets(self.num_global_classes)? {
                    let head = layout.head_for_task(tid)?;
                    let classes = layout.classes_of_head(head)?.to_vec();
                    let labels = localize_labels(set.labels(), &classes)?;
                    let opts = BnnTrainOptions {
                        epochs: self.cfg.coreset_epochs,
                        batch: self.cfg.batch,
                        seen_tasks: 1,
                        optimizer: self.cfg.optimizer,
                        prior: &anchor,
                        prior_weight: self.cfg.prior_weight,
                        kl_scale_n: set.len(),
                        mc_samples: self.cfg.train_mc_samples,
                    };
                    train_bnn(&mut tuned, set.inputs(), &labels, classes.len(), Some(head), &opts, &mut rng, None)?;
                }
            }
            _ => {
                let set = self
                    .coreset
                    .as_labelled_set(self.num_global_classes)?
                    .expect("non-empty checked above");
                let opts = BnnTrainOptions {
                    epochs: self.cfg.coreset_epochs,
                    batch: self.cfg.batch,
                    seen_tasks: 1,
                    optimizer: self.cfg.optimizer,
                    prior: &anchor,
                    prior_weight: self.cfg.prior_weight,
                    kl_scale_n: set.len(),
                    mc_samples: self.cfg.train_mc_samples,
                };
                train_bnn(
                    &mut tuned,
                    set.inputs(),
                    set.labels(),
                    self.num_global_classes,
                    None,
                    &opts,
                    &mut rng,
                    None,
                )?;
            }
        }
        self.eval_model = Some(tuned);
        Ok(())
    }
}

impl Learner for VclLearner {
    fn method(&self) -> Method {
        match (self.cfg.prior_source, self.cfg.coreset_size) {
            (PriorSource::InitialPrior, _) => Method::CoresetOnly,
            (PriorSource::PreviousPosterior, 0) => Method::Vcl,
            (PriorSource::PreviousPosterior, _) => Method::VclCoreset,
        }
    }

    fn train_task(&mut self, task: &TaskDataset, seed: u64, probe: Option<&mut MiProbe>) -> Result<TaskReport> {
        let start = Instant::now();

        // Withhold the coreset before anything trains on the task.
        let reduced;
        let task_ref = if self.cfg.coreset_size > 0 {
            let pick_seed = rng::derive(seed, "coreset-pick", u64::from(task.task_id));
            let (entry, rest) = extract_coreset(task, self.cfg.coreset_size, pick_seed)?;
            self.coreset.upsert(entry);
            reduced = rest;
            &reduced
        } else {
            task
        };

        if self.bnn.is_none() {
            self.ml_initialize(task_ref, seed)?;
        }
        let head = head_for(self.arch.head_mode, self.layout.as_ref(), task.task_id)?;
        let prior = self.kl_prior();
        let bnn = self.bnn.as_mut().unwrap();
        if let Some(h) = head {
            let mut head_rng = rng::stream(seed, "vcl-head-init", u64::from(task.task_id));
            bnn.ensure_head(h, self.cfg.init_var, &mut head_rng);
        }
        let (labels, k_out) = match self.arch.head_mode {
            HeadMode::Multi => (
                localize_labels(task_ref.train.labels(), &task_ref.class_set)?,
                task_ref.class_set.len(),
            ),
            _ => (task_ref.train.labels().to_vec(), self.num_global_classes),
        };
        let opts = BnnTrainOptions {
            epochs: self.cfg.epochs,
            batch: self.cfg.batch,
            seen_tasks: task.task_id as usize,
            optimizer: self.cfg.optimizer,
            prior: &prior,
            prior_weight: self.cfg.prior_weight,
            kl_scale_n: task_ref.train.len(),
            mc_samples: self.cfg.train_mc_samples,
        };
        let mut rng = rng::stream(seed, "vcl-train", u64::from(task.task_id));
        let mi = probe.map(|p| MiObservation { probe: p, task_id: task.task_id, real: &task_ref.train });
        train_bnn(bnn, task_ref.train.inputs(), &labels, k_out, head, &opts, &mut rng, mi)?;

        // The un-fine-tuned posterior is the next prior.
        self.prior = bnn.posterior();
        self.coreset_finetune(seed, task.task_id)?;
        self.tasks_trained = self.tasks_trained.max(task.task_id);
        Ok(TaskReport { train_seconds: start.elapsed().as_secs_f64(), gan_seconds: 0.0 })
    }

    fn predict(&self, x: &Tensor, view: EvalView, seed: u64) -> Result<Tensor> {
        let model = self.prediction_model()?;
        match view {
            EvalView::MultiHead { task_id } => {
                let layout = self.layout.as_ref().ok_or_else(|| Error::config("multi view without layout"))?;
                let head = layout.head_for_task(task_id)?;
                let local = model.predict_probs(x, Some(head), self.cfg.eval_mc_samples, seed)?;
                localize_to_global(&local, layout.classes_of_head(head)?, self.num_global_classes)
            }
            _ => {
                let probs = model.predict_probs(x, None, self.cfg.eval_mc_samples, seed)?;
                finish_prediction(probs, view)
            }
        }
    }

    fn mutual_info(&self, x: &Tensor, s: usize, seed: u64) -> Result<f64> {
        crate::metrics::mutual_information(self.prediction_model()?, x, None, s, seed)
    }

    fn tasks_trained(&self) -> u32 {
        self.tasks_trained
    }
}
