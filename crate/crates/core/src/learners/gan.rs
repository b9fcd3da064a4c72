//! Fully-connected GAN trained per class: latent Gaussian in, sigmoid data
//! vector out, non-saturating generator loss.

use crate::error::{Error, Result};
use crate::models::{Activation, Mlp, MlpConfig};
use crate::rng;
use crate::tensor::{Graph, Optimizer, OptimizerConfig, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub gen_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl GanConfig {
    /// The fully-connected architecture used for image-scale runs: generator
    /// hidden layers 256/512/1024 into a d-wide sigmoid output, mirrored
    /// discriminator, Adam at 2e-4 with beta1 = 0.5, leaky-relu 0.2.
    pub fn paper_fc() -> Self {
        GanConfig {
            latent_dim: 100,
            gen_hidden: vec![256, 512, 1024],
            disc_hidden: vec![512, 256],
            epochs: 200,
            batch_size: 128,
            optimizer: OptimizerConfig::adam(2e-4).with_beta1(0.5),
        }
    }

    /// Scaled-down nets for low-dimensional desk data.
    pub fn desk(epochs: usize) -> Self {
        GanConfig {
            latent_dim: 16,
            gen_hidden: vec![64, 64],
            disc_hidden: vec![64, 32],
            epochs,
            batch_size: 64,
            optimizer: OptimizerConfig::adam(2e-4).with_beta1(0.5),
        }
    }
}

/// Trained generator for a single class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Generator {
    net: Mlp,
    latent_dim: usize,
}

impl Generator {
    /// Sample `n` synthetic rows; sigmoid keeps every value inside (0, 1).
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        let mut rng = rng::stream(seed, "gan-sample", 0);
        let z = Tensor::randn(vec![n, self.latent_dim], 1.0, &mut rng);
        let logits = self.net.logits(&z, None)?;
        let data = logits.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        Tensor::new(logits.shape().to_vec(), data)
    }
}

fn net_config(sizes: Vec<usize>) -> Result<MlpConfig> {
    MlpConfig::single_head(sizes, Activation::LeakyRelu { alpha: 0.2 })
}

/// Train one generator against a mirrored discriminator on the rows of one
/// class. Alternates a discriminator step (real batch up, fake batch down)
/// with a non-saturating generator step.
pub fn train_gan(rows: &Tensor, cfg: &GanConfig, seed: u64) -> Result<Generator> {
    let (n, d) = rows.dims2()?;
    if n == 0 {
        return Err(Error::config("train_gan: no rows for this class"));
    }
    let mut gen_sizes = vec![cfg.latent_dim];
    gen_sizes.extend(&cfg.gen_hidden);
    gen_sizes.push(d);
    let mut disc_sizes = vec![d];
    disc_sizes.extend(&cfg.disc_hidden);
    disc_sizes.push(1);

    let mut init_rng = rng::stream(seed, "gan-init", 0);
    let mut gen = Mlp::init(net_config(gen_sizes)?, &mut init_rng)?;
    let mut disc = Mlp::init(net_config(disc_sizes)?, &mut init_rng)?;
    let mut opt_g = Optimizer::new(cfg.optimizer)?;
    let mut opt_d = Optimizer::new(cfg.optimizer)?;

    let batch = cfg.batch_size.clamp(1, n);
    let mut rng = rng::stream(seed, "gan-train", 0);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (bi, idx) in order.chunks(batch).enumerate() {
            let real = rows.select_rows(idx)?;
            let b = idx.len();

            // Discriminator step: fakes enter as constants.
            let z = Tensor::randn(vec![b, cfg.latent_dim], 1.0, &mut rng);
            let fake_logits = gen.logits(&z, None)?;
            let fake: Vec<f64> = fake_logits.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
            let fake = Tensor::new(vec![b, d], fake)?;
            {
                let mut g = Graph::new();
                let real_v = g.leaf(real);
                let fake_v = g.leaf(fake);
                let (d_real, bind_r) = disc.forward(&mut g, real_v, None)?;
                let (d_fake, bind_f) = disc.forward(&mut g, fake_v, None)?;
                let loss_real = g.bce_with_logits(d_real, 1.0);
                let loss_fake = g.bce_with_logits(d_fake, 0.0);
                let loss = g.add(loss_real, loss_fake)?;
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::numeric(format!("non-finite discriminator loss at epoch {epoch} batch {bi}")));
                }
                g.backward(loss)?;
                let bindings: Vec<_> = bind_r.into_iter().chain(bind_f).collect();
                disc.params.pull_grads(&g, &bindings);
                opt_d.step(&mut disc.params)?;
                disc.params.zero_grad();
            }

            // Generator step: maximize log D(G(z)) through a frozen critic.
            let z = Tensor::randn(vec![b, cfg.latent_dim], 1.0, &mut rng);
            {
                let mut g = Graph::new();
                let zv = g.leaf(z);
                let (g_logits, bind_g) = gen.forward(&mut g, zv, None)?;
                let samples = g.sigmoid(g_logits);
                let (d_out, _bind_d) = disc.forward(&mut g, samples, None)?;
                let loss = g.bce_with_logits(d_out, 1.0);
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::numeric(format!("non-finite generator loss at epoch {epoch} batch {bi}")));
                }
                g.backward(loss)?;
                gen.params.pull_grads(&g, &bind_g);
                opt_g.step(&mut gen.params)?;
                gen.params.zero_grad();
            }
        }
    }
    Ok(Generator { net: gen, latent_dim: cfg.latent_dim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{blob_center, synth_blobs};

    fn tiny_cfg(epochs: usize) -> GanConfig {
        GanConfig {
            latent_dim: 4,
            gen_hidden: vec![16, 16],
            disc_hidden: vec![16],
            epochs,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(2e-4).with_beta1(0.5),
        }
    }

    #[test]
    fn generator_output_stays_in_unit_interval() {
        let set = synth_blobs(2, 8, 40, 0.1, 3).unwrap();
        let rows_idx = set.indices_of_classes(&[0]);
        let rows = set.inputs().select_rows(&rows_idx).unwrap();
        let generator = train_gan(&rows, &tiny_cfg(5), 11).unwrap();
        let samples = generator.sample(64, 5).unwrap();
        assert!(samples.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn equal_seeds_give_identical_generators() {
        let set = synth_blobs(2, 8, 40, 0.1, 3).unwrap();
        let rows_idx = set.indices_of_classes(&[1]);
        let rows = set.inputs().select_rows(&rows_idx).unwrap();
        let a = train_gan(&rows, &tiny_cfg(3), 21).unwrap();
        let b = train_gan(&rows, &tiny_cfg(3), 21).unwrap();
        let sa = a.sample(16, 9).unwrap();
        let sb = b.sample(16, 9).unwrap();
        assert!(sa.data().iter().zip(sb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = train_gan(&rows, &tiny_cfg(3), 22).unwrap();
        let sc = c.sample(16, 9).unwrap();
        assert_ne!(sa.data(), sc.data());
    }

    #[test]
    fn near_point_mass_class_is_memorized() {
        // With spread -> 0 the class collapses to its center; the generated
        // sample mean must land within 0.05 of it in every coordinate.
        let d = 8;
        let set = synth_blobs(2, d, 150, 1e-9, 7).unwrap();
        let rows_idx = set.indices_of_classes(&[0]);
        let rows = set.inputs().select_rows(&rows_idx).unwrap();
        let generator = train_gan(&rows, &tiny_cfg(1500), 31).unwrap();
        let samples = generator.sample(256, 13).unwrap();
        let center = blob_center(2, d, 0, 7);
        for j in 0..d {
            let mean: f64 = (0..256).map(|i| samples.data()[i * d + j]).sum::<f64>() / 256.0;
            assert!(
                (mean - center[j]).abs() < 0.05,
                "coordinate {j}: generated mean {mean} vs center {}",
                center[j]
            );
        }
    }

    #[test]
    fn empty_class_is_a_config_error() {
        let rows = Tensor::zeros(vec![1, 4]);
        // Zero-row tensors cannot be built; emptiness surfaces as a dim error
        // upstream, so exercise the explicit guard via select of no rows.
        let empty = rows.select_rows(&[]);
        assert!(empty.is_err() || train_gan(&empty.unwrap(), &tiny_cfg(1), 0).is_err());
    }
}
