//! The continual-learning methods behind one `Learner` contract:
//! naive baseline, VCL (with or without coresets), coreset-only, EWC and
//! variational generative replay.

mod ewc;
mod gan;
mod naive;
mod trainer;
mod vcl;
mod vgr;

pub use ewc::{EwcConfig, EwcLearner, FisherDiagonal};
pub use gan::{train_gan, GanConfig, Generator};
pub use naive::{NaiveConfig, NaiveLearner};
pub use trainer::BatchRule;
pub use vcl::{PriorSource, VclConfig, VclLearner};
pub use vgr::{GeneratorBank, VgrConfig, VgrLearner};

use crate::data::{apply_head_mask, HeadMode, TaskDataset};
use crate::error::{Error, Result};
use crate::metrics::UncertaintyTrace;
use crate::models::{BayesMlp, HeadLayout};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Method families compared by the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Vcl,
    VclCoreset,
    CoresetOnly,
    Ewc,
    Vgr,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Vcl => "vcl",
            Method::VclCoreset => "vcl_coreset",
            Method::CoresetOnly => "coreset_only",
            Method::Ewc => "ewc",
            Method::Vgr => "vgr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "naive" => Method::Naive,
            "vcl" => Method::Vcl,
            "vcl_coreset" => Method::VclCoreset,
            "coreset_only" => Method::CoresetOnly,
            "ewc" => Method::Ewc,
            "vgr" => Method::Vgr,
            other => return Err(Error::config(format!("unknown method '{other}'"))),
        })
    }

    /// Methods backed by a weight posterior support mutual-information probes.
    pub fn is_bayesian(&self) -> bool {
        !matches!(self, Method::Naive | Method::Ewc)
    }
}

/// How a prediction is scoped at evaluation time.
#[derive(Clone, Copy, Debug)]
pub enum EvalView<'a> {
    /// Full prediction over all global classes.
    Single,
    /// Single-head prediction, then zeros outside the task's classes.
    Masked { class_set: &'a [usize] },
    /// Per-task head; requires the task label (this is what desideratum C
    /// forbids in honest streams).
    MultiHead { task_id: u32 },
}

/// Wall-clock accounting for one task.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct TaskReport {
    pub train_seconds: f64,
    pub gan_seconds: f64,
}

/// Records per-batch mutual information on incoming real data, pre-update.
pub struct MiProbe {
    pub trace: UncertaintyTrace,
    pub samples: usize,
    pub batch_size: usize,
    global_batch: usize,
    seed: u64,
    pick_rng: rand_chacha::ChaCha8Rng,
}

impl MiProbe {
    pub fn new(samples: usize, batch_size: usize, seed: u64) -> Self {
        MiProbe {
            trace: UncertaintyTrace::default(),
            samples,
            batch_size,
            global_batch: 0,
            seed,
            pick_rng: crate::rng::stream(seed, "mi-batch-pick", 0),
        }
    }

    /// Draw one batch from the task's real rows and record its MI, pre-update.
    pub(crate) fn observe(
        &mut self,
        model: &BayesMlp,
        head: Option<usize>,
        task_id: u32,
        real: &crate::data::LabelledSet,
    ) -> Result<()> {
        use rand::seq::SliceRandom;
        let m = real.len();
        let mut pick: Vec<usize> = (0..m).collect();
        pick.shuffle(&mut self.pick_rng);
        pick.truncate(self.batch_size.min(m));
        let batch = real.inputs().select_rows(&pick)?;
        let mi = crate::metrics::mutual_information(
            model,
            &batch,
            head,
            self.samples,
            self.seed ^ (self.global_batch as u64).wrapping_mul(0x9e3779b97f4a7c15),
        )?;
        self.trace.push(self.global_batch, task_id, mi);
        self.global_batch += 1;
        Ok(())
    }
}

/// A stateful continual learner: train on tasks in sequence, predict over the
/// global class space, expose posterior uncertainty when the method has one.
pub trait Learner {
    fn method(&self) -> Method;

    fn train_task(&mut self, task: &TaskDataset, seed: u64, probe: Option<&mut MiProbe>) -> Result<TaskReport>;

    /// Class probabilities over the global label space (rows sum to 1 except
    /// under `Masked`, which zeroes entries for argmax-only use).
    fn predict(&self, x: &Tensor, view: EvalView, seed: u64) -> Result<Tensor>;

    /// Epistemic mutual information on a batch; config error for methods
    /// without a posterior.
    fn mutual_info(&self, x: &Tensor, s: usize, seed: u64) -> Result<f64>;

    fn tasks_trained(&self) -> u32;
}

/// Scatter per-head local probabilities into the global class space.
pub(crate) fn localize_to_global(local: &Tensor, classes: &[usize], num_global: usize) -> Result<Tensor> {
    let (n, k_local) = local.dims2()?;
    if k_local != classes.len() {
        return Err(Error::dim("local probability width vs head class count"));
    }
    let mut out = Tensor::zeros(vec![n, num_global]);
    for i in 0..n {
        for (j, &c) in classes.iter().enumerate() {
            out.data_mut()[i * num_global + c] = local.data()[i * k_local + j];
        }
    }
    Ok(out)
}

/// Relabel global labels to a head's local indices.
pub(crate) fn localize_labels(labels: &[usize], classes: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            classes
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::config(format!("label {l} not in head classes {classes:?}")))
        })
        .collect()
}

/// Routes an `EvalView` through a prediction over global classes.
pub(crate) fn finish_prediction(probs: Tensor, view: EvalView) -> Result<Tensor> {
    match view {
        EvalView::Single => Ok(probs),
        EvalView::Masked { class_set } => apply_head_mask(&probs, class_set),
        EvalView::MultiHead { .. } => Ok(probs),
    }
}

/// Shared helper: the head a task trains in a given mode, creating layout
/// errors early when the caller forgot one.
pub(crate) fn head_for(mode: HeadMode, layout: Option<&HeadLayout>, task_id: u32) -> Result<Option<usize>> {
    match mode {
        HeadMode::Multi => {
            let layout = layout.ok_or_else(|| Error::config("multi mode requires a head layout"))?;
            Ok(Some(layout.head_for_task(task_id)?))
        }
        _ => Ok(None),
    }
}

/// One-hot encode labels over `k` classes.
pub(crate) fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(vec![labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::dim(format!("label {l} out of {k} classes")));
        }
        t.data_mut()[i * k + l] = 1.0;
    }
    Ok(t)
}
