use crate::error::{FixupError, Result};
use crate::tensor::{conv2d, conv2d_backward, matmul, matmul_nt, matmul_tn, Tensor};

use super::batchnorm::{batchnorm, batchnorm_backward};
use super::{Network, ParamId};

#[derive(Clone, Debug)]
pub(crate) enum Layer {
    /// `y = x·Wᵀ`, `W: [out×in]`.
    Linear { w: ParamId },
    Conv { w: ParamId, stride: usize, pad: usize },
    Bias { b: ParamId },
    Mult { s: ParamId },
    Relu,
    BatchNorm { gamma: ParamId, beta: ParamId, stats: usize },
    GlobalAvgPool,
}

#[derive(Clone, Debug)]
pub(crate) enum LayerCache {
    None,
    Input(Tensor),
    Mask(Vec<bool>),
    Bn { xhat: Tensor, inv_std: Vec<f64>, train: bool },
    Pool(Vec<usize>),
}

/// Batch statistics produced by a train-mode BatchNorm layer.
#[derive(Clone, Debug)]
pub(crate) struct BnBatch {
    pub stats: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Layer {
    pub(crate) fn forward(
        &self,
        net: &Network,
        x: Tensor,
        train: bool,
        bn_out: &mut Vec<BnBatch>,
    ) -> Result<(Tensor, LayerCache)> {
        match *self {
            Layer::Linear { w } => {
                let y = matmul_nt(&x, &net.param(w).value)?;
                Ok((y, LayerCache::Input(x)))
            }
            Layer::Conv { w, stride, pad } => {
                let y = conv2d(&x, &net.param(w).value, stride, pad)?;
                Ok((y, LayerCache::Input(x)))
            }
            Layer::Bias { b } => {
                let v = net.param(b).value.data()[0];
                let mut y = x;
                y.data_mut().iter_mut().for_each(|e| *e += v);
                Ok((y, LayerCache::None))
            }
            Layer::Mult { s } => {
                let y = x.scale(net.param(s).value.data()[0]);
                Ok((y, LayerCache::Input(x)))
            }
            Layer::Relu => {
                let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
                let mut y = x;
                y.data_mut().iter_mut().for_each(|e| {
                    if !(*e > 0.0) {
                        // NaN stays NaN so divergence remains visible.
                        if !e.is_nan() {
                            *e = 0.0;
                        }
                    }
                });
                Ok((y, LayerCache::Mask(mask)))
            }
            Layer::BatchNorm { gamma, beta, stats } => {
                let rs = &net.running_stats()[stats];
                let o = batchnorm(
                    &x,
                    net.param(gamma).value.data(),
                    net.param(beta).value.data(),
                    &rs.mean,
                    &rs.var,
                    train,
                )?;
                if train {
                    bn_out.push(BnBatch { stats, mean: o.batch_mean, var: o.batch_var });
                }
                Ok((o.out, LayerCache::Bn { xhat: o.xhat, inv_std: o.inv_std, train }))
            }
            Layer::GlobalAvgPool => {
                let &[n, c, h, w] = x.shape() else {
                    return Err(FixupError::dim(format!("global pooling expects 4-D input, got {:?}", x.shape())));
                };
                let hw = h * w;
                let data: Vec<f64> = (0..n * c)
                    .map(|i| x.data()[i * hw..(i + 1) * hw].iter().fold(0.0, |a, v| a + v) / hw as f64)
                    .collect();
                Ok((Tensor::new(vec![n, c], data)?, LayerCache::Pool(x.shape().to_vec())))
            }
        }
    }

    /// Propagates `g` (gradient w.r.t. this layer's output) to its input and
    /// accumulates parameter gradients into `grads`.
    pub(crate) fn backward(
        &self,
        net: &Network,
        cache: &LayerCache,
        g: Tensor,
        grads: &mut [Tensor],
    ) -> Result<Tensor> {
        match (self, cache) {
            (&Layer::Linear { w }, LayerCache::Input(x)) => {
                let dw = matmul_tn(&g, x)?;
                grads[w.0].axpy(1.0, &dw)?;
                matmul(&g, &net.param(w).value)
            }
            (&Layer::Conv { w, stride, pad }, LayerCache::Input(x)) => {
                let (dx, dw) = conv2d_backward(x, &net.param(w).value, &g, stride, pad)?;
                grads[w.0].axpy(1.0, &dw)?;
                Ok(dx)
            }
            (&Layer::Bias { b }, LayerCache::None) => {
                grads[b.0].data_mut()[0] += g.sum();
                Ok(g)
            }
            (&Layer::Mult { s }, LayerCache::Input(x)) => {
                grads[s.0].data_mut()[0] += g.dot(x)?;
                Ok(g.scale(net.param(s).value.data()[0]))
            }
            (Layer::Relu, LayerCache::Mask(mask)) => {
                let mut g = g;
                for (v, &m) in g.data_mut().iter_mut().zip(mask) {
                    if !m {
                        *v = 0.0;
                    }
                }
                Ok(g)
            }
            (&Layer::BatchNorm { gamma, beta, .. }, LayerCache::Bn { xhat, inv_std, train }) => {
                let (dx, dg, db) = batchnorm_backward(&g, xhat, inv_std, net.param(gamma).value.data(), *train)?;
                for (a, v) in grads[gamma.0].data_mut().iter_mut().zip(dg) {
                    *a += v;
                }
                for (a, v) in grads[beta.0].data_mut().iter_mut().zip(db) {
                    *a += v;
                }
                Ok(dx)
            }
            (Layer::GlobalAvgPool, LayerCache::Pool(shape)) => {
                let hw = shape[2] * shape[3];
                let mut dx = Tensor::zeros(shape);
                for (i, &gv) in g.data().iter().enumerate() {
                    dx.data_mut()[i * hw..(i + 1) * hw].iter_mut().for_each(|v| *v = gv / hw as f64);
                }
                Ok(dx)
            }
            _ => Err(FixupError::State("layer cache does not match layer".into())),
        }
    }
}
