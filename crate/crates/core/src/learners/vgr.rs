//! Variational generative replay: per-class generators produce synthetic
//! old-class data which is mixed into each new task's real data; the Bayesian
//! network always trains against the fixed unit-Gaussian prior.

use super::gan::{train_gan, GanConfig, Generator};
use super::trainer::{train_bnn, train_deterministic, BatchRule, BnnTrainOptions, MiObservation, MlTrainOptions};
use super::{finish_prediction, head_for, localize_labels, localize_to_global, one_hot, EvalView, Learner, Method, MiProbe, TaskReport};
use crate::data::{HeadMode, LabelledSet, TaskDataset};
use crate::error::{Error, Result};
use crate::models::{BayesMlp, GaussianPosterior, HeadLayout, Mlp, MlpConfig};
use crate::rng;
use crate::tensor::{Graph, Optimizer, OptimizerConfig, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// One trained generator per class seen so far.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GeneratorBank {
    entries: Vec<(usize, Generator)>,
}

impl GeneratorBank {
    pub fn upsert(&mut self, class: usize, generator: Generator) {
        match self.entries.iter_mut().find(|(c, _)| *c == class) {
            Some((_, g)) => *g = generator,
            None => self.entries.push((class, generator)),
        }
    }

    pub fn get(&self, class: usize) -> Option<&Generator> {
        self.entries.iter().find(|(c, _)| *c == class).map(|(_, g)| g)
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.entries.iter().map(|(c, _)| *c).collect();
        c.sort_unstable();
        c
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VgrConfig {
    pub epochs: usize,
    pub batch: BatchRule,
    pub optimizer: OptimizerConfig,
    pub prior_weight: f64,
    pub init_var: f64,
    pub ml_init_epochs: usize,
    pub train_mc_samples: usize,
    pub eval_mc_samples: usize,
    /// Synthetic rows sampled per previously-seen class, fresh each task.
    pub samples_per_class: usize,
    pub gan: GanConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VgrLearner {
    cfg: VgrConfig,
    arch: MlpConfig,
    layout: Option<HeadLayout>,
    num_global_classes: usize,
    bnn: Option<BayesMlp>,
    bank: GeneratorBank,
    seen_classes: Vec<usize>,
    tasks_trained: u32,
}

impl VgrLearner {
    pub fn new(arch: MlpConfig, cfg: VgrConfig, layout: Option<HeadLayout>, num_global_classes: usize) -> Self {
        VgrLearner {
            cfg,
            arch,
            layout,
            num_global_classes,
            bnn: None,
            bank: GeneratorBank::default(),
            seen_classes: Vec::new(),
            tasks_trained: 0,
        }
    }

    pub fn bank(&self) -> &GeneratorBank {
        &self.bank
    }

    fn model(&self) -> Result<&BayesMlp> {
        self.bnn.as_ref().ok_or_else(|| Error::state("no task trained yet"))
    }

    /// Sample `samples_per_class` rows from every stored generator whose class
    /// is not in `exclude`; every row carries the class of its generator.
    pub fn replay_set(&self, exclude: &[usize], seed: u64) -> Result<Option<LabelledSet>> {
        let classes: Vec<usize> = self
            .seen_classes
            .iter()
            .copied()
            .filter(|c| !exclude.contains(c))
            .collect();
        if classes.is_empty() || self.cfg.samples_per_class == 0 {
            return Ok(None);
        }
        let mut inputs: Option<Tensor> = None;
        let mut labels = Vec::new();
        for class in classes {
            let generator = self.bank.get(class).ok_or_else(|| {
                Error::state(format!("class {class} was seen but has no stored generator"))
            })?;
            let rows = generator.sample(self.cfg.samples_per_class, rng::derive(seed, "replay", class as u64))?;
            labels.extend(std::iter::repeat(class).take(self.cfg.samples_per_class));
            inputs = Some(match inputs {
                None => rows,
                Some(acc) => acc.vstack(&rows)?,
            });
        }
        Ok(Some(LabelledSet::new(inputs.unwrap(), labels, self.num_global_classes)?))
    }

    fn ml_initialize(&mut self, task: &TaskDataset, seed: u64) -> Result<()> {
        let mut init_rng = rng::stream(seed, "vgr-ml-init", u64::from(task.task_id));
        let mut ml = Mlp::init(self.arch.clone(), &mut init_rng)?;
        let head = head_for(self.arch.head_mode, self.layout.as_ref(), task.task_id)?;
        if let Some(h) = head {
            ml.ensure_head(h, &mut init_rng);
        }
        let (labels, k_out) = match self.arch.head_mode {
            HeadMode::Multi => (localize_labels(task.train.labels(), &task.class_set)?, task.class_set.len()),
            _ => (task.train.labels().to_vec(), self.num_global_classes),
        };
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

    /// Mixture training in multi-head mode: each batch is partitioned by the
    /// head its rows belong to, with per-head NLL terms weighted by row share.
    fn train_multi_head_mixture(
        &mut self,
        mixture: &LabelledSet,
        row_tasks: &[u32],
        task_id: u32,
        seed: u64,
    ) -> Result<()> {
        let layout = self
            .layout
            .as_ref()
            .ok_or_else(|| Error::config("multi mode requires a head layout"))?
            .clone();
        let prior = GaussianPosterior::unit();
        let bnn = self.bnn.as_mut().unwrap();
        let n = mixture.len();
        let batch = self.cfg.batch.size(n, task_id as usize);
        let mut opt = Optimizer::new(self.cfg.optimizer)?;
        let mut rng = rng::stream(seed, "vgr-train", u64::from(task_id));
        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for (bi, idx) in order.chunks(batch).enumerate() {
                let mut by_head: Vec<(usize, Vec<usize>)> = Vec::new();
                for &i in idx {
                    let head = layout.head_for_task(row_tasks[i])?;
                    match by_head.iter_mut().find(|(h, _)| *h == head) {
                        Some((_, rows)) => rows.push(i),
                        None => by_head.push((head, vec![i])),
                    }
                }
                by_head.sort_by_key(|(h, _)| *h);

                let mut g = Graph::new();
                let mut bindings = Vec::new();
                let mut loss: Option<crate::tensor::Var> = None;
                for (head, rows) in &by_head {
                    let x = mixture.inputs().select_rows(rows)?;
                    let classes = layout.classes_of_head(*head)?.to_vec();
                    let globals: Vec<usize> = rows.iter().map(|&i| mixture.labels()[i]).collect();
                    let locals = localize_labels(&globals, &classes)?;
                    let targets = one_hot(&locals, classes.len())?;
                    let xv = g.leaf(x);
                    let (logits, b) = bnn.forward_sampled(&mut g, xv, Some(*head), &mut rng)?;
                    bindings.extend(b);
                    let nll = g.softmax_cross_entropy(logits, &targets)?;
                    let weighted = g.scale(nll, rows.len() as f64 / idx.len() as f64);
                    loss = Some(match loss {
                        None => weighted,
                        Some(acc) => g.add(acc, weighted)?,
                    });
                }
                let mut loss = loss.expect("non-empty batch");
                if self.cfg.prior_weight != 0.0 {
                    let heads: Vec<usize> = by_head.iter().map(|(h, _)| *h).collect();
                    let (kl, kb) = bnn.kl_term_heads(&mut g, &prior, &heads)?;
                    bindings.extend(kb);
                    let scaled = g.scale(kl, self.cfg.prior_weight / n as f64);
                    loss = g.add(loss, scaled)?;
                }
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite replay loss {lv} at epoch {epoch} batch {bi}"
                    )));
                }
                g.backward(loss)?;
                bnn.params.pull_grads(&g, &bindings);
                opt.step(&mut bnn.params)?;
                bnn.params.zero_grad();
            }
        }
        Ok(())
    }
}

impl Learner for VgrLearner {
    fn method(&self) -> Method {
        Method::Vgr
    }

    fn train_task(&mut self, task: &TaskDataset, seed: u64, probe: Option<&mut MiProbe>) -> Result<TaskReport> {
        let start = Instant::now();

        // Synthetic rows for every seen class outside the current task.
        let replay = self.replay_set(&task.class_set, rng::derive(seed, "vgr-replay", u64::from(task.task_id)))?;
        let (mixture, row_tasks) = match &replay {
            None => (task.train.clone(), vec![task.task_id; task.train.len()]),
            Some(r) => {
                let mixture = task.train.concat(r)?;
                let mut tasks = vec![task.task_id; task.train.len()];
                // Replayed rows belong to the task their class appeared in.
                for l in r.labels() {
                    tasks.push(self.task_of_class(*l)?);
                }
                (mixture, tasks)
            }
        };

        if self.bnn.is_none() {
            self.ml_initialize(task, seed)?;
        }
        let head = head_for(self.arch.head_mode, self.layout.as_ref(), task.task_id)?;
        {
            let bnn = self.bnn.as_mut().unwrap();
            if self.arch.head_mode == HeadMode::Multi {
                let mut head_rng = rng::stream(seed, "vgr-head-init", u64::from(task.task_id));
                bnn.ensure_head(head.unwrap(), self.cfg.init_var, &mut head_rng);
            }
        }

        match self.arch.head_mode {
            HeadMode::Multi => {
                self.train_multi_head_mixture(&mixture, &row_tasks, task.task_id, seed)?;
            }
            _ => {
                let prior = GaussianPosterior::unit();
                let opts = BnnTrainOptions {
                    epochs: self.cfg.epochs,
                    batch: self.cfg.batch,
                    seen_tasks: task.task_id as usize,
                    optimizer: self.cfg.optimizer,
                    prior: &prior,
                    prior_weight: self.cfg.prior_weight,
                    kl_scale_n: mixture.len(),
                    mc_samples: self.cfg.train_mc_samples,
                };
                let mut rng = rng::stream(seed, "vgr-train", u64::from(task.task_id));
                let mi = probe.map(|p| MiObservation { probe: p, task_id: task.task_id, real: &task.train });
                train_bnn(
                    self.bnn.as_mut().unwrap(),
                    mixture.inputs(),
                    mixture.labels(),
                    self.num_global_classes,
                    None,
                    &opts,
                    &mut rng,
                    mi,
                )?;
            }
        }
        let train_seconds = start.elapsed().as_secs_f64();

        // Train one generator per new class on that class's real rows.
        let gan_start = Instant::now();
        for &class in &task.class_set {
            let rows_idx = task.train.indices_of_classes(&[class]);
            if rows_idx.is_empty() {
                return Err(Error::config(format!("task {} has no rows of class {class}", task.task_id)));
            }
            let rows = task.train.inputs().select_rows(&rows_idx)?;
            let generator = train_gan(&rows, &self.cfg.gan, rng::derive(seed, "gan", class as u64))?;
            self.bank.upsert(class, generator);
            if !self.seen_classes.contains(&class) {
                self.seen_classes.push(class);
            }
        }
        self.tasks_trained = self.tasks_trained.max(task.task_id);
        Ok(TaskReport { train_seconds, gan_seconds: gan_start.elapsed().as_secs_f64() })
    }

    fn predict(&self, x: &Tensor, view: EvalView, seed: u64) -> Result<Tensor> {
        let model = self.model()?;
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
        crate::metrics::mutual_information(self.model()?, x, None, s, seed)
    }

    fn tasks_trained(&self) -> u32 {
        self.tasks_trained
    }
}

impl VgrLearner {
    /// The task a class first appeared in (for routing replay rows to heads).
    fn task_of_class(&self, class: usize) -> Result<u32> {
        if let Some(layout) = &self.layout {
            for t in 1..=self.tasks_trained {
                if let Ok(h) = layout.head_for_task(t) {
                    if layout.classes_of_head(h)?.contains(&class) {
                        return Ok(t);
                    }
                }
            }
        }
        // Single-head streams do not route by task; tag with the first task.
        Ok(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs_split;

    fn desk_cfg() -> VgrConfig {
        VgrConfig {
            epochs: 4,
            batch: BatchRule::Fixed(32),
            optimizer: OptimizerConfig::adam(1e-3),
            prior_weight: 1.0,
            init_var: 1e-6,
            ml_init_epochs: 4,
            train_mc_samples: 1,
            eval_mc_samples: 10,
            samples_per_class: 25,
            gan: GanConfig::desk(30),
        }
    }

    fn arch(d: usize, k: usize) -> MlpConfig {
        MlpConfig::single_head(vec![d, 24, k], crate::models::Activation::Relu).unwrap()
    }

    fn split_tasks() -> Vec<TaskDataset> {
        let (train, test) = synth_blobs_split(4, 8, 40, 10, 0.05, 17).unwrap();
        let stream = crate::data::build_split_stream(&train, &test, &[vec![0, 1], vec![2, 3]], HeadMode::Single).unwrap();
        stream.tasks
    }

    #[test]
    fn first_task_has_no_replay() {
        let tasks = split_tasks();
        let mut learner = VgrLearner::new(arch(8, 4), desk_cfg(), None, 4);
        assert!(learner.replay_set(&tasks[0].class_set, 0).unwrap().is_none());
        learner.train_task(&tasks[0], 3, None).unwrap();
        assert_eq!(learner.bank().len(), 2);
    }

    #[test]
    fn replayed_rows_carry_their_generator_class_and_exact_counts() {
        let tasks = split_tasks();
        let mut learner = VgrLearner::new(arch(8, 4), desk_cfg(), None, 4);
        learner.train_task(&tasks[0], 3, None).unwrap();
        let replay = learner.replay_set(&tasks[1].class_set, 99).unwrap().unwrap();
        let mut counts = [0usize; 4];
        for &l in replay.labels() {
            counts[l] += 1;
        }
        assert_eq!(counts, [25, 25, 0, 0]);
        // Sanity: rows of class 0 resemble generator-0 output (range check).
        assert!(replay.inputs().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn missing_generator_for_seen_class_is_a_state_error() {
        let tasks = split_tasks();
        let mut learner = VgrLearner::new(arch(8, 4), desk_cfg(), None, 4);
        learner.train_task(&tasks[0], 3, None).unwrap();
        // Corrupt the state: pretend a class was seen without a generator.
        learner.seen_classes.push(3);
        let err = learner.replay_set(&[], 7).unwrap_err();
        assert!(matches!(err, Error::State(_)), "{err}");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let tasks = split_tasks();
        let mut a = VgrLearner::new(arch(8, 4), desk_cfg(), None, 4);
        let mut b = VgrLearner::new(arch(8, 4), desk_cfg(), None, 4);
        for t in &tasks {
            a.train_task(t, 5, None).unwrap();
            b.train_task(t, 5, None).unwrap();
        }
        let x = tasks[0].test.inputs();
        let pa = a.predict(x, EvalView::Single, 1).unwrap();
        let pb = b.predict(x, EvalView::Single, 1).unwrap();
        assert!(pa.data().iter().zip(pb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
