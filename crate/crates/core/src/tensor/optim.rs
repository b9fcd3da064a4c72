use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamNode {
    pub value: Tensor,
    pub grad: Tensor,
    pub requires_grad: bool,
}

/// Handle to a parameter inside a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Ordered registry of parameters. Models register tensors here once and
/// rebuild graph leaves from them every step.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Params {
    nodes: Vec<ParamNode>,
    names: Vec<String>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.nodes.push(ParamNode { value, grad, requires_grad: true });
        self.names.push(name.into());
        ParamId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.nodes.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.nodes[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn node(&self, id: ParamId) -> &ParamNode {
        &self.nodes[id.0]
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.nodes[id.0].requires_grad = flag;
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Insert the current value of a parameter as a graph leaf.
    pub fn leaf(&self, g: &mut Graph, id: ParamId) -> Var {
        g.leaf(self.nodes[id.0].value.clone())
    }

    /// Pull gradients out of a finished graph into the parameter store.
    pub fn pull_grads(&mut self, g: &Graph, bindings: &[(ParamId, Var)]) {
        for (id, var) in bindings {
            let src = g.grad(*var);
            for (dst, s) in self.nodes[id.0].grad.data_mut().iter_mut().zip(src) {
                *dst += s;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn with_beta1(mut self, beta1: f64) -> Self {
        self.beta1 = beta1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.kind == OptimizerKind::Adam {
            for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
                if !(0.0..1.0).contains(&v) {
                    return Err(Error::config(format!("{name} must be in [0, 1), got {v}")));
                }
            }
        }
        Ok(())
    }
}

/// SGD / Adam over a [`Params`] store. Moment buffers are keyed by parameter
/// index and sized lazily, so the store may grow between tasks.
pub struct Optimizer {
    cfg: OptimizerConfig,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer { cfg, step_count: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        while self.m.len() < params.len() {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        for (idx, id) in params.ids().enumerate().collect::<Vec<_>>() {
            if !params.node(id).requires_grad {
                continue;
            }
            if !params.grad(id).all_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient in parameter '{}'",
                    params.name(id)
                )));
            }
            let n = params.grad(id).len();
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    let lr = self.cfg.learning_rate;
                    let grad = params.grad(id).data().to_vec();
                    let w = params.value_mut(id).data_mut();
                    for (wv, gv) in w.iter_mut().zip(&grad) {
                        *wv -= lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    if self.m[idx].len() != n {
                        self.m[idx] = vec![0.0; n];
                        self.v[idx] = vec![0.0; n];
                    }
                    let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                    let lr = self.cfg.learning_rate;
                    let eps = self.cfg.epsilon;
                    let bc1 = 1.0 - b1.powf(t);
                    let bc2 = 1.0 - b2.powf(t);
                    let grad = params.grad(id).data().to_vec();
                    let m = &mut self.m[idx];
                    let v = &mut self.v[idx];
                    let w = params.value_mut(id).data_mut();
                    for i in 0..n {
                        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
