//! Shared training loops for deterministic and variational networks.

use super::{one_hot, MiProbe};
use crate::data::LabelledSet;
use crate::error::{Error, Result};
use crate::models::{BayesMlp, GaussianPosterior, Mlp};
use crate::tensor::{Graph, Optimizer, OptimizerConfig, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How a batch size is derived from the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchRule {
    /// Whole training split per step.
    Full,
    /// Fixed size.
    Fixed(usize),
    /// `base * number of seen tasks` (the replay schedule that keeps the
    /// number of batches constant as the mixture grows).
    PerSeenTask(usize),
    /// Whole split, capped.
    CappedFull(usize),
}

impl BatchRule {
    pub fn size(&self, n: usize, seen_tasks: usize) -> usize {
        let b = match *self {
            BatchRule::Full => n,
            BatchRule::Fixed(b) => b,
            BatchRule::PerSeenTask(base) => base * seen_tasks.max(1),
            BatchRule::CappedFull(cap) => n.min(cap),
        };
        b.clamp(1, n)
    }
}

/// Shuffled index batches for one epoch.
pub(crate) fn epoch_batches<R: Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Per-parameter quadratic penalty (the consolidation term), keyed by
/// parameter name so the model may grow heads between tasks.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct QuadPenalty {
    pub weight: f64,
    pub terms: Vec<(String, Tensor, Tensor)>, // (name, coeff, anchor)
}

impl QuadPenalty {
    pub fn find(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        self.terms
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, c, a)| (c, a))
    }
}

pub(crate) struct MlTrainOptions<'a> {
    pub epochs: usize,
    pub batch: BatchRule,
    pub optimizer: OptimizerConfig,
    pub penalty: Option<&'a QuadPenalty>,
}

/// Minibatch NLL training of a deterministic network, with an optional
/// quadratic consolidation penalty. Labels are local to the trained head.
pub(crate) fn train_deterministic<R: Rng>(
    mlp: &mut Mlp,
    inputs: &Tensor,
    labels: &[usize],
    k_out: usize,
    head: Option<usize>,
    opts: &MlTrainOptions,
    rng: &mut R,
) -> Result<()> {
    let n = inputs.shape()[0];
    let batch = opts.batch.size(n, 1);
    let mut opt = Optimizer::new(opts.optimizer)?;
    for epoch in 0..opts.epochs {
        for (bi, idx) in epoch_batches(n, batch, rng).into_iter().enumerate() {
            let x = inputs.select_rows(&idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let targets = one_hot(&y, k_out)?;

            let mut g = Graph::new();
            let xv = g.leaf(x);
            let (logits, bindings) = mlp.forward(&mut g, xv, head)?;
            let mut loss = g.softmax_cross_entropy(logits, &targets)?;
            if let Some(pen) = opts.penalty {
                if pen.weight < 0.0 {
                    return Err(Error::config("penalty weight must be non-negative"));
                }
                let mut acc = None;
                for (id, var) in &bindings {
                    if let Some((coeff, anchor)) = pen.find(mlp.params.name(*id)) {
                        let term = g.quad_penalty(*var, anchor, coeff)?;
                        acc = Some(match acc {
                            None => term,
                            Some(a) => g.add(a, term)?,
                        });
                    }
                }
                if let Some(a) = acc {
                    let scaled = g.scale(a, pen.weight / 2.0);
                    loss = g.add(loss, scaled)?;
                }
            }
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss {loss_val} at epoch {epoch} batch {bi}"
                )));
            }
            g.backward(loss)?;
            mlp.params.pull_grads(&g, &bindings);
            opt.step(&mut mlp.params)?;
            mlp.params.zero_grad();
        }
    }
    Ok(())
}

pub(crate) struct BnnTrainOptions<'a> {
    pub epochs: usize,
    pub batch: BatchRule,
    pub seen_tasks: usize,
    pub optimizer: OptimizerConfig,
    pub prior: &'a GaussianPosterior,
    pub prior_weight: f64,
    /// Divisor applied to the KL term (normally the training-set size, so the
    /// loss matches per-example NLL scale).
    pub kl_scale_n: usize,
    pub mc_samples: usize,
}

pub(crate) struct MiObservation<'a> {
    pub probe: &'a mut MiProbe,
    pub task_id: u32,
    /// Real rows of the current task; each batch draws its MI reading from
    /// these, not from any replayed data.
    pub real: &'a LabelledSet,
}

/// Variational minibatch training: mean NLL of reparameterized forward passes
/// plus `prior_weight * KL(q || prior) / kl_scale_n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_bnn<R: Rng>(
    bnn: &mut BayesMlp,
    inputs: &Tensor,
    labels: &[usize],
    k_out: usize,
    head: Option<usize>,
    opts: &BnnTrainOptions,
    rng: &mut R,
    mut mi: Option<MiObservation<'_>>,
) -> Result<()> {
    let n = inputs.shape()[0];
    let batch = opts.batch.size(n, opts.seen_tasks);
    let mut opt = Optimizer::new(opts.optimizer)?;
    for epoch in 0..opts.epochs {
        for (bi, idx) in epoch_batches(n, batch, rng).into_iter().enumerate() {
            if let Some(obs) = mi.as_mut() {
                obs.probe.observe(bnn, head, obs.task_id, obs.real)?;
            }

            let x = inputs.select_rows(&idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let targets = one_hot(&y, k_out)?;

            let mut g = Graph::new();
            let xv = g.leaf(x);
            let mut bindings = Vec::new();
            let mut nll = None;
            for _ in 0..opts.mc_samples.max(1) {
                let (logits, b) = bnn.forward_sampled(&mut g, xv, head, rng)?;
                bindings.extend(b);
                let term = g.softmax_cross_entropy(logits, &targets)?;
                nll = Some(match nll {
                    None => term,
                    Some(a) => g.add(a, term)?,
                });
            }
            let mut loss = g.scale(nll.expect("mc_samples >= 1"), 1.0 / opts.mc_samples.max(1) as f64);
            if opts.prior_weight != 0.0 {
                let (kl, kl_bindings) = bnn.kl_term(&mut g, opts.prior, head)?;
                bindings.extend(kl_bindings);
                let scaled = g.scale(kl, opts.prior_weight / opts.kl_scale_n.max(1) as f64);
                loss = g.add(loss, scaled)?;
            }
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite variational loss {loss_val} at epoch {epoch} batch {bi} \
                     (prior_weight {}, kl_scale {})",
                    opts.prior_weight, opts.kl_scale_n
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
