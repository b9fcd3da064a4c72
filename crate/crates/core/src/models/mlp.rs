//! Deterministic fully-connected network.

use super::{Activation, MlpConfig};
use crate::data::HeadMode;
use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Graph, ParamId, Params, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub(crate) struct Layer {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    cfg: MlpConfig,
    pub params: Params,
    trunk: Vec<Layer>,
    heads: Vec<Layer>,
}

fn init_layer<R: Rng>(params: &mut Params, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Layer {
    let std = (2.0 / fan_in as f64).sqrt();
    let w = params.add(format!("{name}.w"), Tensor::randn(vec![fan_in, fan_out], std, rng));
    let b = params.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
    Layer { w, b }
}

impl Mlp {
    /// He-initialized network. In multi-head mode no heads exist yet; they are
    /// created lazily when their task is first trained.
    pub fn init<R: Rng>(cfg: MlpConfig, rng: &mut R) -> Result<Self> {
        let mut params = Params::new();
        let sizes = cfg.trunk_sizes();
        let mut trunk = Vec::new();
        for i in 0..sizes.len() - 1 {
            trunk.push(init_layer(&mut params, &format!("trunk{i}"), sizes[i], sizes[i + 1], rng));
        }
        let mut mlp = Mlp { cfg, params, trunk, heads: Vec::new() };
        if mlp.cfg.head_mode != HeadMode::Multi {
            mlp.ensure_head(0, rng);
        }
        Ok(mlp)
    }

    pub fn cfg(&self) -> &MlpConfig {
        &self.cfg
    }

    pub fn heads_created(&self) -> usize {
        self.heads.len()
    }

    /// Create output layers up to and including `head`.
    pub fn ensure_head<R: Rng>(&mut self, head: usize, rng: &mut R) {
        let fan_in = *self.cfg.trunk_sizes().last().unwrap();
        let fan_out = self.cfg.output_dim();
        while self.heads.len() <= head {
            let idx = self.heads.len();
            self.heads.push(init_layer(&mut self.params, &format!("head{idx}"), fan_in, fan_out, rng));
        }
    }

    fn resolve_head(&self, head: Option<usize>) -> Result<usize> {
        match (self.cfg.head_mode, head) {
            (HeadMode::Multi, Some(h)) if h < self.heads.len() => Ok(h),
            (HeadMode::Multi, Some(h)) => Err(Error::config(format!("head {h} not created"))),
            (HeadMode::Multi, None) => Err(Error::config("multi-head forward requires a head")),
            (_, _) => Ok(0),
        }
    }

    pub(crate) fn layers_for_head(&self, head: usize) -> Vec<Layer> {
        let mut layers = self.trunk.clone();
        layers.push(self.heads[head]);
        layers
    }

    pub(crate) fn trunk_layers(&self) -> &[Layer] {
        &self.trunk
    }

    pub(crate) fn head_layers(&self) -> &[Layer] {
        &self.heads
    }

    fn activate(&self, g: &mut Graph, v: Var) -> Var {
        match self.cfg.activation {
            Activation::Relu => g.relu(v),
            Activation::LeakyRelu { alpha } => g.leaky_relu(v, alpha),
        }
    }

    /// Tape forward pass. Returns logits plus the (param, leaf) bindings that
    /// participated, for gradient pull-back.
    pub fn forward(&self, g: &mut Graph, x: Var, head: Option<usize>) -> Result<(Var, Vec<(ParamId, Var)>)> {
        let head = self.resolve_head(head)?;
        let layers = self.layers_for_head(head);
        let mut bindings = Vec::with_capacity(layers.len() * 2);
        let mut h = x;
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            let w = self.params.leaf(g, layer.w);
            let b = self.params.leaf(g, layer.b);
            bindings.push((layer.w, w));
            bindings.push((layer.b, b));
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            if i != last {
                h = self.activate(g, h);
            }
        }
        Ok((h, bindings))
    }

    /// Graph-free forward pass for evaluation.
    pub fn logits(&self, x: &Tensor, head: Option<usize>) -> Result<Tensor> {
        let head = self.resolve_head(head)?;
        let layers = self.layers_for_head(head);
        let (n, mut width) = x.dims2()?;
        if width != self.cfg.input_dim() {
            return Err(Error::dim(format!(
                "input dim {width} vs configured {}",
                self.cfg.input_dim()
            )));
        }
        let mut h = x.data().to_vec();
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            let w = self.params.value(layer.w);
            let b = self.params.value(layer.b);
            let (fan_in, fan_out) = w.dims2()?;
            let mut out = matmul_raw(&h, n, fan_in, w.data(), fan_out);
            for r in 0..n {
                for c in 0..fan_out {
                    out[r * fan_out + c] += b.data()[c];
                }
            }
            if i != last {
                for v in out.iter_mut() {
                    *v = match self.cfg.activation {
                        Activation::Relu => v.max(0.0),
                        Activation::LeakyRelu { alpha } => {
                            if *v > 0.0 {
                                *v
                            } else {
                                alpha * *v
                            }
                        }
                    };
                }
            }
            h = out;
            width = fan_out;
        }
        Tensor::new(vec![n, width], h)
    }
}
