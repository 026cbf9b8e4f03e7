use crate::error::{FixupError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CrossEntropy {
    /// Per-example loss.
    pub losses: Vec<f64>,
    pub mean: f64,
    pub probs: Tensor,
    /// Per-example Shannon entropy of the softmax, in nats.
    pub entropy: Vec<f64>,
    /// Gradient of `mean` w.r.t. the logits: `(p − y) / M`.
    pub dlogits: Tensor,
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut y = Tensor::zeros(&[labels.len().max(1), classes]);
    if labels.is_empty() {
        return Err(FixupError::pre("no labels"));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(FixupError::pre(format!("label {l} out of range for {classes} classes")));
        }
        y.data_mut()[i * classes + l] = 1.0;
    }
    Ok(y)
}

/// Cross-entropy against one-hot targets.
pub fn cross_entropy(z: &Tensor, y: &Tensor) -> Result<CrossEntropy> {
    check_shapes(z, y)?;
    for i in 0..y.rows() {
        let row = y.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(FixupError::pre(format!("target row {i} is not one-hot")));
        }
    }
    soft_ce(z, y)
}

/// Cross-entropy against soft targets whose rows are distributions.
pub fn soft_cross_entropy(z: &Tensor, y: &Tensor) -> Result<CrossEntropy> {
    check_shapes(z, y)?;
    for i in 0..y.rows() {
        let row = y.row(i);
        if row.iter().any(|&v| v < 0.0) {
            return Err(FixupError::pre(format!("target row {i} has a negative entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(FixupError::pre(format!("target row {i} sums to {s}, not 1")));
        }
    }
    soft_ce(z, y)
}

fn check_shapes(z: &Tensor, y: &Tensor) -> Result<()> {
    let (_, c) = z.dims2("logits")?;
    if c < 2 {
        return Err(FixupError::pre("cross-entropy needs at least 2 classes"));
    }
    if z.shape() != y.shape() {
        return Err(FixupError::dim(format!("logits {:?} vs targets {:?}", z.shape(), y.shape())));
    }
    Ok(())
}

fn soft_ce(z: &Tensor, y: &Tensor) -> Result<CrossEntropy> {
    let (m, c) = z.dims2("logits")?;
    let mut losses = Vec::with_capacity(m);
    let mut entropy = Vec::with_capacity(m);
    let mut probs = Tensor::zeros(&[m, c]);
    let mut dlogits = Tensor::zeros(&[m, c]);
    for i in 0..m {
        let zr = z.row(i);
        let yr = y.row(i);
        let max = zr.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + zr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let mut loss = 0.0;
        let mut h = 0.0;
        for k in 0..c {
            let logp = zr[k] - lse;
            let p = logp.exp();
            if yr[k] != 0.0 {
                loss -= yr[k] * logp;
            }
            if p > 0.0 {
                h -= p * logp;
            }
            probs.data_mut()[i * c + k] = p;
            dlogits.data_mut()[i * c + k] = (p - yr[k]) / m as f64;
        }
        losses.push(loss);
        entropy.push(h);
    }
    let mean = losses.iter().fold(0.0, |a, b| a + b) / m as f64;
    Ok(CrossEntropy { losses, mean, probs, entropy, dlogits })
}
