//! Synthetic Gaussian-cluster dataset: the fast desk-scale stand-in.
//!
//! Clusters share a low-dimensional mixing basis, so all classes lie near one
//! affine slab of the input cube the way image classes lie near a common
//! manifold. Later classes therefore resemble earlier ones, while a coordinate
//! permutation maps the slab to an unrelated one. That keeps the split/permuted
//! contrast meaningful at desk scale.

use super::LabelledSet;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// Rank of the shared cluster basis.
pub const BLOBS_LATENT_DIM: usize = 8;

/// Isotropic off-slab noise, as a fraction of `spread`.
const ISO_NOISE_RATIO: f64 = 0.05;

/// Scale of the mixing basis entries (per-coordinate center std).
const BASIS_SCALE: f64 = 0.35;

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

struct BlobFamily {
    basis: Vec<f64>,        // d x r
    center_latents: Vec<f64>, // k x r
    d: usize,
    r: usize,
}

impl BlobFamily {
    fn seeded(k: usize, d: usize, seed: u64) -> Self {
        let r = BLOBS_LATENT_DIM.min(d);
        let mut basis_rng = rng::stream(seed, "blobs-basis", 0);
        let scale = BASIS_SCALE / (r as f64).sqrt();
        let basis: Vec<f64> = (0..d * r)
            .map(|_| scale * basis_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut center_rng = rng::stream(seed, "blobs-centers", 0);
        let center_latents: Vec<f64> = (0..k * r)
            .map(|_| center_rng.sample::<f64, _>(StandardNormal))
            .collect();
        BlobFamily { basis, center_latents, d, r }
    }

    fn mix(&self, latent: &[f64], out: &mut [f64]) {
        for i in 0..self.d {
            let row = &self.basis[i * self.r..(i + 1) * self.r];
            out[i] += row.iter().zip(latent).map(|(b, z)| b * z).sum::<f64>();
        }
    }

    fn center(&self, class: usize) -> Vec<f64> {
        let mut c = vec![0.5; self.d];
        self.mix(&self.center_latents[class * self.r..(class + 1) * self.r], &mut c);
        c.iter_mut().for_each(|v| *v = clip01(*v));
        c
    }

    fn sample_set(&self, k: usize, n_per_class: usize, spread: f64, seed: u64, split: u64) -> Result<LabelledSet> {
        let mut rng = rng::stream(seed, "blobs-samples", split);
        let n = k * n_per_class;
        let mut data = vec![0.0; n * self.d];
        let mut labels = vec![0usize; n];
        let mut latent = vec![0.0; self.r];
        for class in 0..k {
            let center = self.center(class);
            for j in 0..n_per_class {
                let row = class * n_per_class + j;
                labels[row] = class;
                for z in latent.iter_mut() {
                    *z = spread * rng.sample::<f64, _>(StandardNormal);
                }
                let out = &mut data[row * self.d..(row + 1) * self.d];
                out.copy_from_slice(&center);
                self.mix(&latent, out);
                for v in out.iter_mut() {
                    let iso: f64 = rng.sample(StandardNormal);
                    *v = clip01(*v + spread * ISO_NOISE_RATIO * iso);
                }
            }
        }
        LabelledSet::new(Tensor::new(vec![n, self.d], data)?, labels, k)
    }
}

/// Nominal (pre-noise) center of one class, for oracle checks.
pub fn blob_center(k: usize, d: usize, class: usize, seed: u64) -> Vec<f64> {
    BlobFamily::seeded(k, d, seed).center(class)
}

/// K seeded Gaussian clusters in [0,1]^d; deterministic per seed.
pub fn synth_blobs(k: usize, d: usize, n_per_class: usize, spread: f64, seed: u64) -> Result<LabelledSet> {
    if k < 2 || d < 2 {
        return Err(Error::config(format!("synth_blobs: need k >= 2, d >= 2 (got k={k}, d={d})")));
    }
    BlobFamily::seeded(k, d, seed).sample_set(k, n_per_class, spread, seed, 0)
}

/// Train/test pair drawn around the same centers.
pub fn synth_blobs_split(
    k: usize,
    d: usize,
    n_train_per_class: usize,
    n_test_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(LabelledSet, LabelledSet)> {
    if k < 2 || d < 2 {
        return Err(Error::config(format!("synth_blobs: need k >= 2, d >= 2 (got k={k}, d={d})")));
    }
    let fam = BlobFamily::seeded(k, d, seed);
    let train = fam.sample_set(k, n_train_per_class, spread, seed, 0)?;
    let test = fam.sample_set(k, n_test_per_class, spread, seed, 1)?;
    Ok((train, test))
}
