//! Reverse-mode tape. A graph is rebuilt for every training step: leaves are
//! inserted from parameter values, the forward ops record themselves, and
//! `backward` walks the tape once in reverse. Nodes created after the loss
//! cannot feed it, so the walk starts at the loss index.

use super::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { a: Var, c: f64 },
    Relu { a: Var },
    LeakyRelu { a: Var, alpha: f64 },
    Sigmoid { a: Var },
    Softplus { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    /// Mean negative log-likelihood over rows; caches softmax probabilities.
    SoftmaxCrossEntropy { logits: Var, labels: Tensor, probs: Tensor },
    /// w = mean + exp(log_var / 2) * noise
    Reparam { mean: Var, log_var: Var, noise: Tensor },
    /// Sum over elements of KL(N(mean, e^log_var) || N(prior_mean, e^prior_log_var)).
    KlToPrior { mean: Var, log_var: Var, prior_mean: Tensor, prior_log_var: Tensor },
    /// sum(coeff * (x - anchor)^2)
    QuadPenalty { x: Var, anchor: Tensor, coeff: Tensor },
    /// Mean over elements of softplus(x) - target * x (binary cross-entropy on logits).
    BceWithLogits { logits: Var, target: f64 },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

/// A single-use computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the most recent `backward` calls.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn zero_all_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- forward ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!("matmul: [{m}x{k}] * [{k2}x{n}]")));
        }
        let data = matmul_raw(self.value(a).data(), m, k, self.value(b).data(), n);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul { a, b }))
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Broadcast a `[n]` (or `[1, n]`) bias across the rows of `[m, n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let blen = self.value(bias).len();
        if blen != n {
            return Err(Error::dim(format!("add_bias: {n} columns vs {blen} bias")));
        }
        let bdata = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bdata[j];
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| c * x).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale { a, c })
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { alpha * x }, Op::LeakyRelu { a, alpha })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, stable_softplus, Op::Softplus { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s / n), Op::Mean { a })
    }

    /// Mean negative log-likelihood of one-hot `labels` under row-wise softmax
    /// of `logits`. The logit gradient is (softmax(logits) - labels) / rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        let (lb, lk) = labels.dims2()?;
        if k == 0 {
            return Err(Error::dim("softmax_cross_entropy: zero classes"));
        }
        if (b, k) != (lb, lk) {
            return Err(Error::dim(format!(
                "softmax_cross_entropy: logits [{b}x{k}] vs labels [{lb}x{lk}]"
            )));
        }
        let probs = super::softmax_rows(self.value(logits))?;
        let mut nll = 0.0;
        for i in 0..b {
            for j in 0..k {
                let y = labels.data()[i * k + j];
                if y != 0.0 {
                    nll -= y * probs.data()[i * k + j].max(1e-300).ln();
                }
            }
        }
        nll /= b as f64;
        Ok(self.push(
            Tensor::scalar(nll),
            Op::SoftmaxCrossEntropy { logits, labels: labels.clone(), probs },
        ))
    }

    /// Differentiable reparameterized Gaussian draw: mean + exp(log_var/2) * noise.
    /// The noise is caller-supplied so sampling stays deterministic per seed.
    pub fn reparam_sample(&mut self, mean: Var, log_var: Var, noise: &Tensor) -> Result<Var> {
        if self.shape(mean) != self.shape(log_var) || self.shape(mean) != noise.shape() {
            return Err(Error::dim("reparam_sample: shape mismatch"));
        }
        let data: Vec<f64> = self
            .value(mean)
            .data()
            .iter()
            .zip(self.value(log_var).data())
            .zip(noise.data())
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let t = Tensor::new(self.shape(mean).to_vec(), data)?;
        Ok(self.push(t, Op::Reparam { mean, log_var, noise: noise.clone() }))
    }

    /// Closed-form KL divergence from N(mean, exp(log_var)) to a constant
    /// diagonal Gaussian prior, summed over elements.
    pub fn kl_to_prior(
        &mut self,
        mean: Var,
        log_var: Var,
        prior_mean: &Tensor,
        prior_log_var: &Tensor,
    ) -> Result<Var> {
        if self.shape(mean) != self.shape(log_var)
            || self.shape(mean) != prior_mean.shape()
            || self.shape(mean) != prior_log_var.shape()
        {
            return Err(Error::dim("kl_to_prior: shape mismatch"));
        }
        let mut kl = 0.0;
        for i in 0..prior_mean.len() {
            let mq = self.value(mean).data()[i];
            let lq = self.value(log_var).data()[i];
            let mp = prior_mean.data()[i];
            let lp = prior_log_var.data()[i];
            kl += 0.5 * (lp - lq) + ((lq).exp() + (mq - mp).powi(2)) / (2.0 * lp.exp()) - 0.5;
        }
        Ok(self.push(
            Tensor::scalar(kl),
            Op::KlToPrior {
                mean,
                log_var,
                prior_mean: prior_mean.clone(),
                prior_log_var: prior_log_var.clone(),
            },
        ))
    }

    /// sum(coeff * (x - anchor)^2); the quadratic parameter penalty.
    pub fn quad_penalty(&mut self, x: Var, anchor: &Tensor, coeff: &Tensor) -> Result<Var> {
        if self.shape(x) != anchor.shape() || self.shape(x) != coeff.shape() {
            return Err(Error::dim("quad_penalty: shape mismatch"));
        }
        let mut s = 0.0;
        for i in 0..anchor.len() {
            let d = self.value(x).data()[i] - anchor.data()[i];
            s += coeff.data()[i] * d * d;
        }
        Ok(self.push(
            Tensor::scalar(s),
            Op::QuadPenalty { x, anchor: anchor.clone(), coeff: coeff.clone() },
        ))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against a constant target,
    /// computed in the numerically stable softplus form.
    pub fn bce_with_logits(&mut self, logits: Var, target: f64) -> Var {
        let n = self.value(logits).len() as f64;
        let s: f64 = self
            .value(logits)
            .data()
            .iter()
            .map(|&x| stable_softplus(x) - target * x)
            .sum();
        self.push(Tensor::scalar(s / n), Op::BceWithLogits { logits, target })
    }

    // ---- backward ----

    /// Populate gradients of `loss` (a scalar node) into every node that
    /// feeds it. All node gradients are reset first, so repeated calls give
    /// identical results; to differentiate a sum of losses, add them into one
    /// scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward: loss must be a scalar"));
        }
        self.zero_all_grads();
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            // Detach grad and op from node i so the arms may mutate earlier nodes.
            let g = std::mem::take(&mut self.nodes[i].grad);
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(&op, i, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = g;
        }
        Ok(())
    }

    fn add_to_grad(&mut self, v: Var, contrib: impl Iterator<Item = f64>) {
        for (slot, c) in self.nodes[v.0].grad.iter_mut().zip(contrib) {
            *slot += c;
        }
    }

    fn propagate(&mut self, op: &Op, i: usize, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.value(a).dims2().expect("checked");
                let n = self.value(b).shape()[1];
                let da = matmul_nt(g, m, n, self.value(b).data(), k);
                let db = matmul_tn(self.value(a).data(), m, k, g, n);
                self.add_to_grad(a, da.into_iter());
                self.add_to_grad(b, db.into_iter());
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_to_grad(a, g.iter().copied());
                self.add_to_grad(b, g.iter().copied());
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.add_to_grad(a, g.iter().copied());
                self.add_to_grad(b, g.iter().map(|x| -x));
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = g.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                self.add_to_grad(a, da.into_iter());
                self.add_to_grad(b, db.into_iter());
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let (m, n) = self.value(x).dims2().expect("checked");
                self.add_to_grad(x, g.iter().copied());
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
                self.add_to_grad(bias, db.into_iter());
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                self.add_to_grad(a, g.iter().map(|x| c * x));
            }
            Op::Relu { a } => {
                let a = *a;
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.add_to_grad(a, da.into_iter());
            }
            Op::LeakyRelu { a, alpha } => {
                let (a, alpha) = (*a, *alpha);
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { alpha * g })
                    .collect();
                self.add_to_grad(a, da.into_iter());
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                self.add_to_grad(a, da.into_iter());
            }
            Op::Softplus { a } => {
                let a = *a;
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, &x)| g / (1.0 + (-x).exp()))
                    .collect();
                self.add_to_grad(a, da.into_iter());
            }
            Op::Sum { a } => {
                let a = *a;
                let s = g[0];
                let n = self.nodes[a.0].grad.len();
                self.add_to_grad(a, std::iter::repeat(s).take(n));
            }
            Op::Mean { a } => {
                let a = *a;
                let n = self.nodes[a.0].grad.len();
                let s = g[0] / n as f64;
                self.add_to_grad(a, std::iter::repeat(s).take(n));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                let b = labels.shape()[0] as f64;
                let da: Vec<f64> = probs
                    .data()
                    .iter()
                    .zip(labels.data())
                    .map(|(p, y)| g[0] * (p - y) / b)
                    .collect();
                self.add_to_grad(logits, da.into_iter());
            }
            Op::Reparam { mean, log_var, noise } => {
                let (mean, log_var) = (*mean, *log_var);
                let dlv: Vec<f64> = g
                    .iter()
                    .zip(self.value(log_var).data())
                    .zip(noise.data())
                    .map(|((g, lv), e)| g * 0.5 * (0.5 * lv).exp() * e)
                    .collect();
                self.add_to_grad(mean, g.iter().copied());
                self.add_to_grad(log_var, dlv.into_iter());
            }
            Op::KlToPrior { mean, log_var, prior_mean, prior_log_var } => {
                let (mean, log_var) = (*mean, *log_var);
                let s = g[0];
                let dm: Vec<f64> = self
                    .value(mean)
                    .data()
                    .iter()
                    .zip(prior_mean.data())
                    .zip(prior_log_var.data())
                    .map(|((mq, mp), lp)| s * (mq - mp) / lp.exp())
                    .collect();
                let dlv: Vec<f64> = self
                    .value(log_var)
                    .data()
                    .iter()
                    .zip(prior_log_var.data())
                    .map(|(lq, lp)| s * 0.5 * ((lq - lp).exp() - 1.0))
                    .collect();
                self.add_to_grad(mean, dm.into_iter());
                self.add_to_grad(log_var, dlv.into_iter());
            }
            Op::QuadPenalty { x, anchor, coeff } => {
                let x = *x;
                let s = g[0];
                let dx: Vec<f64> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(anchor.data())
                    .zip(coeff.data())
                    .map(|((xv, av), cv)| s * 2.0 * cv * (xv - av))
                    .collect();
                self.add_to_grad(x, dx.into_iter());
            }
            Op::BceWithLogits { logits, target } => {
                let (logits, target) = (*logits, *target);
                let n = self.nodes[logits.0].grad.len() as f64;
                let da: Vec<f64> = self
                    .value(logits)
                    .data()
                    .iter()
                    .map(|&x| g[0] * (1.0 / (1.0 + (-x).exp()) - target) / n)
                    .collect();
                self.add_to_grad(logits, da.into_iter());
            }
        }
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_returns_input() {
        let mut g = Graph::new();
        let eye = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = g.leaf(Tensor::new(vec![2, 2], vec![3.0, -1.0, 2.5, 7.0]).unwrap());
        let out = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(out).data(), g.value(m).data());
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(crate::error::Error::Dimension(_))));
    }

    #[test]
    fn relu_at_zero_is_zero_with_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn leaky_relu_definition() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1], vec![-1.0]).unwrap());
        let y = g.leaky_relu(x, 0.2);
        assert!((g.value(y).data()[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![3, 10]));
        let mut labels = Tensor::zeros(vec![3, 10]);
        for (i, cls) in [0usize, 4, 9].iter().enumerate() {
            labels.data_mut()[i * 10 + cls] = 1.0;
        }
        let loss = g.softmax_cross_entropy(logits, &labels).unwrap();
        assert!((g.value(loss).item() - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_grad_is_probs_minus_labels_over_rows() {
        // Single row with p = (0.9, 0.1) and y = (0, 1): logit grad (0.9, -0.9).
        let p0: f64 = 0.9;
        let logit0 = (p0 / (1.0 - p0)).ln();
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::new(vec![1, 2], vec![logit0, 0.0]).unwrap());
        let labels = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let loss = g.softmax_cross_entropy(logits, &labels).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits);
        assert!((grad[0] - 0.9).abs() < 1e-12);
        assert!((grad[1] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_zero_classes_rejected() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        // Zero-width tensors cannot even be built; a label width mismatch is the
        // closest reachable contract violation.
        let labels = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!(g.softmax_cross_entropy(logits, &labels).is_err());
    }

    #[test]
    fn reparam_zero_noise_returns_mean() {
        let mut g = Graph::new();
        let mean = g.leaf(Tensor::new(vec![1, 3], vec![0.5, -2.0, 3.0]).unwrap());
        let log_var = g.leaf(Tensor::zeros(vec![1, 3]));
        let noise = Tensor::zeros(vec![1, 3]);
        let w = g.reparam_sample(mean, log_var, &noise).unwrap();
        assert_eq!(g.value(w).data(), g.value(mean).data());
    }

    #[test]
    fn reparam_collapsed_variance_returns_mean() {
        let mut g = Graph::new();
        let mean = g.leaf(Tensor::new(vec![1, 2], vec![0.25, -1.5]).unwrap());
        let log_var = g.leaf(Tensor::filled(vec![1, 2], -30.0));
        let noise = Tensor::new(vec![1, 2], vec![1.7, -0.3]).unwrap();
        let w = g.reparam_sample(mean, log_var, &noise).unwrap();
        for (o, m) in g.value(w).data().iter().zip(g.value(mean).data()) {
            assert!((o - m).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_twice_with_zero_grad_is_identical() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![0.3, -0.4, 1.2, 0.9]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.5, -0.7, 0.2]).unwrap());
        let c = g.matmul(a, b).unwrap();
        let d = g.sigmoid(c);
        let loss = g.mean(d);
        g.backward(loss).unwrap();
        let first = g.grad(a).to_vec();
        g.zero_all_grads();
        g.backward(loss).unwrap();
        assert_eq!(first, g.grad(a));
    }

    #[test]
    fn component_gradients_sum_to_joint_gradient() {
        // backward(l1) and backward(l2) read separately, then compared with
        // backward(l1 + l2) on the same graph.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![0.4, -0.9]).unwrap());
        let s = g.sigmoid(x);
        let l1 = g.sum(s);
        let r = g.relu(x);
        let l2 = g.mean(r);
        let joint = g.add(l1, l2).unwrap();
        g.backward(l1).unwrap();
        let g1 = g.grad(x).to_vec();
        g.backward(l2).unwrap();
        let g2 = g.grad(x).to_vec();
        g.backward(joint).unwrap();
        for ((a, b), j) in g1.iter().zip(&g2).zip(g.grad(x)) {
            assert!((a + b - j).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_to_prior_zero_when_equal() {
        let mut g = Graph::new();
        let mean = g.leaf(Tensor::new(vec![1, 3], vec![0.1, -0.2, 5.0]).unwrap());
        let log_var = g.leaf(Tensor::new(vec![1, 3], vec![0.0, -1.0, 2.0]).unwrap());
        let pm = Tensor::new(vec![1, 3], vec![0.1, -0.2, 5.0]).unwrap();
        let plv = Tensor::new(vec![1, 3], vec![0.0, -1.0, 2.0]).unwrap();
        let kl = g.kl_to_prior(mean, log_var, &pm, &plv).unwrap();
        assert!(g.value(kl).item().abs() < 1e-12);
    }

    #[test]
    fn kl_unit_gaussians_mean_shift() {
        // KL(N(1,1) || N(0,1)) = 0.5
        let mut g = Graph::new();
        let mean = g.leaf(Tensor::scalar(1.0));
        let log_var = g.leaf(Tensor::scalar(0.0));
        let kl = g.kl_to_prior(mean, log_var, &Tensor::scalar(0.0), &Tensor::scalar(0.0)).unwrap();
        assert!((g.value(kl).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bce_with_logits_matches_naive_form() {
        let xs = [-3.0, -0.2, 0.0, 1.5, 8.0];
        for target in [0.0, 1.0] {
            let mut g = Graph::new();
            let l = g.leaf(Tensor::new(vec![1, 5], xs.to_vec()).unwrap());
            let loss = g.bce_with_logits(l, target);
            let naive: f64 = xs
                .iter()
                .map(|&x| {
                    let p = 1.0 / (1.0 + (-x as f64).exp());
                    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / 5.0;
            assert!((g.value(loss).item() - naive).abs() < 1e-9);
        }
    }
}
