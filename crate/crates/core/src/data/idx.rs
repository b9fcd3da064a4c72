//! IDX container reader/writer (the MNIST distribution format):
//! big-endian magic 2051 for images, 2049 for labels.

use super::LabelledSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(Error::parse(path.display().to_string(), "truncated header"));
    }
    Ok(u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]))
}

/// Load an images/labels IDX pair into a LabelledSet with pixels scaled to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabelledSet> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;

    let magic = read_u32_be(&img_bytes, 0, images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::parse(
            images_path.display().to_string(),
            format!("bad images magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"),
        ));
    }
    let n = read_u32_be(&img_bytes, 4, images_path)? as usize;
    let rows = read_u32_be(&img_bytes, 8, images_path)? as usize;
    let cols = read_u32_be(&img_bytes, 12, images_path)? as usize;
    let d = rows * cols;
    let want = 16 + n * d;
    if img_bytes.len() != want {
        return Err(Error::parse(
            images_path.display().to_string(),
            format!("truncated image payload: {} bytes, expected {want}", img_bytes.len()),
        ));
    }

    let magic = read_u32_be(&lbl_bytes, 0, labels_path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::parse(
            labels_path.display().to_string(),
            format!("bad labels magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"),
        ));
    }
    let n_lbl = read_u32_be(&lbl_bytes, 4, labels_path)? as usize;
    if lbl_bytes.len() != 8 + n_lbl {
        return Err(Error::parse(
            labels_path.display().to_string(),
            format!("truncated label payload: {} bytes, expected {}", lbl_bytes.len(), 8 + n_lbl),
        ));
    }
    if n != n_lbl {
        return Err(Error::parse(
            images_path.display().to_string(),
            format!("count mismatch: {n} images vs {n_lbl} labels"),
        ));
    }

    let data: Vec<f64> = img_bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    LabelledSet::new(Tensor::new(vec![n, d], data)?, labels, num_classes)
}

/// Write a LabelledSet back out as an IDX pair. `rows * cols` must equal the
/// input dimension; pixels are quantized with round(v * 255).
pub fn write_idx(set: &LabelledSet, images_path: &Path, labels_path: &Path, rows: usize, cols: usize) -> Result<()> {
    let d = set.dim();
    if rows * cols != d {
        return Err(Error::dim(format!("write_idx: {rows}x{cols} != input dim {d}")));
    }
    let n = set.len();

    let mut img = Vec::with_capacity(16 + n * d);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for v in set.inputs().data() {
        img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }

    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    for l in set.labels() {
        lbl.push(*l as u8);
    }

    fs::File::create(images_path)?.write_all(&img)?;
    fs::File::create(labels_path)?.write_all(&lbl)?;
    Ok(())
}

/// Load the conventional train/test file names from a directory
/// (`train-images-idx3-ubyte` etc., as distributed for MNIST and FashionMNIST).
pub fn load_idx_dir(dir: &Path) -> Result<(LabelledSet, LabelledSet)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    let k = train.num_classes().max(test.num_classes());
    Ok((train.with_num_classes(k)?, test.with_num_classes(k)?))
}
