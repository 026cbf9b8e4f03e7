//! Datasets: IDX files, CIFAR-10 binary batches, and a seeded Gaussian
//! mixture for quick depth sweeps.

use std::fs;
use std::path::Path;

use crate::error::{FixupError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Inputs and labels of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `[N×d]` or `[N×C×H×W]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Split> {
        if inputs.rows() != labels.len() {
            return Err(FixupError::dim(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Split { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` as a minibatch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.inputs.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    fn flatten(self) -> Result<Split> {
        let n = self.inputs.rows();
        let d = self.inputs.row_len();
        Ok(Split { inputs: self.inputs.reshape(&[n, d])?, labels: self.labels })
    }
}

/// Per-channel affine transform applied to both splits: `(x − mean) / std`.
/// Flat inputs count as one channel per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub classes: usize,
    /// `None` when the inputs are used as generated.
    pub normalization: Option<Normalization>,
}

/// `(channels, inner)` for a batch tensor; flat inputs have one channel per
/// feature.
fn channel_layout(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        &[_, c, h, w] => (c, h * w),
        &[_, d] => (d, 1),
        s => (s[1..].iter().product(), 1),
    }
}

fn channel_stats(t: &Tensor) -> Normalization {
    let (c, inner) = channel_layout(t);
    let n = t.rows();
    let count = (n * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for s in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            for v in &t.data()[(s * c + ch) * inner..(s * c + ch + 1) * inner] {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for s in 0..n {
        for ch in 0..c {
            for v in &t.data()[(s * c + ch) * inner..(s * c + ch + 1) * inner] {
                sq[ch] += (v - mean[ch]) * (v - mean[ch]);
            }
        }
    }
    // Constant channels (e.g. image borders) are centred but not scaled.
    let std = sq.iter().map(|s| (s / count).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
    Normalization { mean, std }
}

fn apply_norm(t: &mut Tensor, norm: &Normalization) {
    let (c, inner) = channel_layout(t);
    let n = t.rows();
    let d = t.data_mut();
    for s in 0..n {
        for ch in 0..c {
            for v in &mut d[(s * c + ch) * inner..(s * c + ch + 1) * inner] {
                *v = (*v - norm.mean[ch]) / norm.std[ch];
            }
        }
    }
}

impl Dataset {
    pub fn new(train: Split, test: Split, classes: usize) -> Result<Dataset> {
        if train.inputs.shape()[1..] != test.inputs.shape()[1..] {
            return Err(FixupError::dim("train and test inputs have different shapes"));
        }
        for &l in train.labels.iter().chain(&test.labels) {
            if l >= classes {
                return Err(FixupError::Format(format!("label {l} out of range for {classes} classes")));
            }
        }
        Ok(Dataset { train, test, classes, normalization: None })
    }

    /// Standardizes both splits with statistics of the training split.
    pub fn standardized(mut self) -> Dataset {
        let norm = channel_stats(&self.train.inputs);
        apply_norm(&mut self.train.inputs, &norm);
        apply_norm(&mut self.test.inputs, &norm);
        self.normalization = Some(norm);
        self
    }

    /// Reshapes image inputs to `[N×(C·H·W)]` for MLP networks.
    pub fn flattened(self) -> Result<Dataset> {
        Ok(Dataset {
            train: self.train.flatten()?,
            test: self.test.flatten()?,
            classes: self.classes,
            normalization: self.normalization,
        })
    }

    /// Shape of one example.
    pub fn example_shape(&self) -> &[usize] {
        &self.train.inputs.shape()[1..]
    }
}

// ---------------------------------------------------------------------------
// IDX

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FixupError::Format("IDX header is truncated".into()))
}

/// Parses IDX image bytes into `[N×1×rows×cols]` with values in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(FixupError::Format(format!(
            "IDX images: expected magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(FixupError::Format(format!(
            "IDX images: payload has {} bytes, header promises {need}",
            payload.len()
        )));
    }
    let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(FixupError::Format(format!(
            "IDX labels: expected magic 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(FixupError::Format(format!(
            "IDX labels: payload has {} bytes, header promises {n}",
            payload.len()
        )));
    }
    Ok(payload[..n].iter().map(|&b| b as usize).collect())
}

/// Reads one IDX image/label file pair (values in `[0, 1]`).
pub fn load_idx(images: &Path, labels: &Path) -> Result<Split> {
    let x = parse_idx_images(&fs::read(images)?)?;
    let y = parse_idx_labels(&fs::read(labels)?)?;
    Split::new(x, y)
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != n * rows * cols {
        return Err(FixupError::dim("pixel count does not match image dimensions"));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary

/// Parses concatenated 3073-byte records into `[N×3×32×32]` in `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Split> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(FixupError::Format(format!(
            "CIFAR-10 batch length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Split::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels)
}

/// Reads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10_bin(paths: &[&Path]) -> Result<Split> {
    let mut bytes = Vec::new();
    for p in paths {
        let b = fs::read(p)?;
        if b.len() % CIFAR_RECORD != 0 {
            return Err(FixupError::Format(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD}",
                p.display(),
                b.len()
            )));
        }
        bytes.extend(b);
    }
    parse_cifar10(&bytes)
}

// ---------------------------------------------------------------------------
// Synthetic

/// Share of a synthetic dataset assigned to the training split.
pub const SYNTH_TRAIN_FRACTION: f64 = 0.8;

/// Class `k` is centred at `separation · e_(k mod dim)` with unit isotropic
/// noise. Examples are shuffled with `seed` and split 80/20.
pub fn synth_gaussian(classes: usize, dim: usize, n_per_class: usize, separation: f64, seed: u64) -> Result<Dataset> {
    synth(classes, dim, n_per_class, separation, seed, false)
}

/// Like [`synth_gaussian`], but each example's centre is
/// `±separation · e_(k mod dim)` with the sign drawn uniformly, so no
/// linear classifier beats chance by much and features must be learned.
pub fn synth_antipodal(classes: usize, dim: usize, n_per_class: usize, separation: f64, seed: u64) -> Result<Dataset> {
    synth(classes, dim, n_per_class, separation, seed, true)
}

fn synth(classes: usize, dim: usize, n_per_class: usize, separation: f64, seed: u64, antipodal: bool) -> Result<Dataset> {
    if classes < 2 || dim < 1 || n_per_class < 1 || !(separation >= 0.0) {
        return Err(FixupError::config("synthetic data needs classes >= 2, dim >= 1, n_per_class >= 1, separation >= 0"));
    }
    let mut rng = Rng::new(seed);
    let n = classes * n_per_class;
    let mut x = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for k in 0..classes {
        for _ in 0..n_per_class {
            let sign = if antipodal && rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            for j in 0..dim {
                let centre = if j == k % dim { sign * separation } else { 0.0 };
                x.push(centre + rng.normal());
            }
            y.push(k);
        }
    }
    let all = Tensor::new(vec![n, dim], x)?;
    let order = rng.permutation(n);
    let n_train = ((n as f64) * SYNTH_TRAIN_FRACTION).round() as usize;
    let (tr, te) = order.split_at(n_train);
    let pick = |idx: &[usize]| Split::new(all.select_rows(idx), idx.iter().map(|&i| y[i]).collect());
    if te.is_empty() || tr.is_empty() {
        return Err(FixupError::config("synthetic data too small for an 80/20 split"));
    }
    Dataset::new(pick(tr)?, pick(te)?, classes)
}
