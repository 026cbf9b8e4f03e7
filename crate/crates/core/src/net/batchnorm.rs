//! Batch normalization over the batch axis (per feature for `[N×d]`
//! inputs, per channel for `[N×C×H×W]`).

use crate::error::{FixupError, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct BatchNormOutput {
    pub out: Tensor,
    /// Normalized input before the affine map.
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    /// Batch statistics (train mode only): mean and unbiased variance.
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Returns `(features, inner)` where `inner` is the number of spatial
/// positions per feature.
fn layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[n, d] => Ok((n, d, 1)),
        &[n, c, h, w] => Ok((n, c, h * w)),
        s => Err(FixupError::dim(format!("batchnorm expects 2-D or 4-D input, got {s:?}"))),
    }
}

/// `train = true` normalizes with batch statistics; otherwise the supplied
/// running statistics are used.
pub fn batchnorm(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    train: bool,
) -> Result<BatchNormOutput> {
    let (n, c, inner) = layout(x)?;
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(FixupError::dim(format!("batchnorm parameters do not match {c} features")));
    }
    let count = n * inner;
    if train && count < 2 {
        return Err(FixupError::pre("batchnorm in train mode needs at least 2 values per feature"));
    }
    let data = x.data();
    let idx = |s: usize, ch: usize, p: usize| (s * c + ch) * inner + p;

    let (mean, var_biased, var_unbiased) = if train {
        let mut mean = vec![0.0; c];
        let mut ss = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for s in 0..n {
                for p in 0..inner {
                    acc += data[idx(s, ch, p)];
                }
            }
            mean[ch] = acc / count as f64;
            let mut acc = 0.0;
            for s in 0..n {
                for p in 0..inner {
                    let d = data[idx(s, ch, p)] - mean[ch];
                    acc += d * d;
                }
            }
            ss[ch] = acc;
        }
        let vb = ss.iter().map(|s| s / count as f64).collect::<Vec<_>>();
        let vu = ss.iter().map(|s| s / (count - 1) as f64).collect::<Vec<_>>();
        (mean, vb, vu)
    } else {
        (running_mean.to_vec(), running_var.to_vec(), Vec::new())
    };

    let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = x.clone();
    let mut out = x.clone();
    {
        let xh = xhat.data_mut();
        for s in 0..n {
            for ch in 0..c {
                for p in 0..inner {
                    let i = idx(s, ch, p);
                    xh[i] = (data[i] - mean[ch]) * inv_std[ch];
                }
            }
        }
    }
    {
        let o = out.data_mut();
        let xh = xhat.data();
        for s in 0..n {
            for ch in 0..c {
                for p in 0..inner {
                    let i = idx(s, ch, p);
                    o[i] = gamma[ch] * xh[i] + beta[ch];
                }
            }
        }
    }
    Ok(BatchNormOutput {
        out,
        xhat,
        inv_std,
        batch_mean: if train { mean } else { Vec::new() },
        batch_var: var_unbiased,
    })
}

/// Gradients `(dx, dgamma, dbeta)` given the forward pass's normalized input.
pub fn batchnorm_backward(
    grad_out: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &[f64],
    train: bool,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, inner) = layout(grad_out)?;
    let count = (n * inner) as f64;
    let g = grad_out.data();
    let xh = xhat.data();
    let idx = |s: usize, ch: usize, p: usize| (s * c + ch) * inner + p;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        for s in 0..n {
            for p in 0..inner {
                let i = idx(s, ch, p);
                dgamma[ch] += g[i] * xh[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dx = grad_out.clone();
    let d = dx.data_mut();
    for s in 0..n {
        for ch in 0..c {
            for p in 0..inner {
                let i = idx(s, ch, p);
                d[i] = if train {
                    // dxhat = g·γ; dx = (1/σ)(dxhat − mean(dxhat) − xhat·mean(dxhat·xhat))
                    gamma[ch] * inv_std[ch] * (g[i] - dbeta[ch] / count - xh[i] * dgamma[ch] / count)
                } else {
                    gamma[ch] * inv_std[ch] * g[i]
                };
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample, Distribution, Rng};

    fn randn(shape: &[usize], seed: u64, std: f64, mean: f64) -> Tensor {
        sample(&Distribution::Normal { mean, std }, shape, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn normalized_batch_has_zero_mean_unit_variance() {
        let x = randn(&[64, 5], 1, 5.0, 2.0);
        let out = batchnorm(&x, &[1.0; 5], &[0.0; 5], &[0.0; 5], &[1.0; 5], true).unwrap();
        for ch in 0..5 {
            let col: Vec<f64> = (0..64).map(|s| out.xhat.data()[s * 5 + ch]).collect();
            let m = col.iter().sum::<f64>() / 64.0;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 64.0;
            assert!(m.abs() <= 1e-10);
            assert!((v - 1.0).abs() <= 1e-6, "{v}");
        }
    }

    #[test]
    fn standardized_input_passes_through() {
        let raw = randn(&[128, 3], 2, 1.0, 0.0);
        let st = batchnorm(&raw, &[1.0; 3], &[0.0; 3], &[0.0; 3], &[1.0; 3], true).unwrap().xhat;
        let again = batchnorm(&st, &[1.0; 3], &[0.0; 3], &[0.0; 3], &[1.0; 3], true).unwrap().out;
        assert!(again.sub(&st).unwrap().max_abs() < 1e-4);
    }

    #[test]
    fn batch_of_one_rejected_in_train_mode() {
        let x = Tensor::zeros(&[1, 4]);
        assert!(batchnorm(&x, &[1.0; 4], &[0.0; 4], &[0.0; 4], &[1.0; 4], true).is_err());
        assert!(batchnorm(&x, &[1.0; 4], &[0.0; 4], &[0.0; 4], &[1.0; 4], false).is_ok());
    }

    fn check_backward(shape: &[usize], train: bool) {
        let c = shape[1];
        let x = randn(shape, 3, 1.5, 0.3);
        let gamma: Vec<f64> = (0..c).map(|i| 0.5 + i as f64 * 0.3).collect();
        let beta: Vec<f64> = (0..c).map(|i| -0.2 + i as f64 * 0.1).collect();
        let rm: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let rv: Vec<f64> = (0..c).map(|i| 1.0 + 0.5 * i as f64).collect();
        let r = randn(shape, 4, 1.0, 0.0);
        let f = |x: &Tensor, g: &[f64], b: &[f64]| {
            batchnorm(x, g, b, &rm, &rv, train).unwrap().out.dot(&r).unwrap()
        };
        let fwd = batchnorm(&x, &gamma, &beta, &rm, &rv, train).unwrap();
        let (dx, dg, db) = batchnorm_backward(&r, &fwd.xhat, &fwd.inv_std, &gamma, train).unwrap();
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (f(&xp, &gamma, &beta) - f(&xm, &gamma, &beta)) / (2.0 * h);
            assert!(rel(fd, dx.data()[i]) <= 1e-6, "dx[{i}] fd={fd} an={}", dx.data()[i]);
        }
        for ch in 0..c {
            let mut gp = gamma.clone();
            gp[ch] += h;
            let mut gm = gamma.clone();
            gm[ch] -= h;
            let fd = (f(&x, &gp, &beta) - f(&x, &gm, &beta)) / (2.0 * h);
            assert!(rel(fd, dg[ch]) <= 1e-6);
            let mut bp = beta.clone();
            bp[ch] += h;
            let mut bm = beta.clone();
            bm[ch] -= h;
            let fd = (f(&x, &gamma, &bp) - f(&x, &gamma, &bm)) / (2.0 * h);
            assert!(rel(fd, db[ch]) <= 1e-6);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        check_backward(&[6, 3], true);
        check_backward(&[3, 2, 2, 2], true);
        check_backward(&[4, 3], false);
    }
}
