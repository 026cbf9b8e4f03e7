use crate::error::{FixupError, Result};
use crate::tensor::Tensor;

use super::batchnorm::BN_MOMENTUM;
use super::layers::{BnBatch, Layer, LayerCache};
use super::{Network, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// BatchNorm uses batch statistics.
    Train,
    /// BatchNorm uses running statistics.
    Eval,
}

#[derive(Clone, Debug)]
struct BlockCache {
    branch: Vec<LayerCache>,
    shortcut: Vec<LayerCache>,
}

/// Everything a forward pass leaves behind for the backward pass and the
/// probes.
#[derive(Clone, Debug)]
pub struct Trace {
    version: u64,
    /// Block boundaries `x_0 .. x_L`; `x_0` is the stem output.
    pub activations: Vec<Tensor>,
    pub logits: Tensor,
    /// Set when any activation or logit is NaN or infinite.
    pub non_finite: bool,
    stem: Vec<LayerCache>,
    blocks: Vec<BlockCache>,
    head: Vec<LayerCache>,
    bn: Vec<BnBatch>,
}

impl Trace {
    /// Every ReLU on/off bit and max-pool argmax of the pass, in layer
    /// order. The loss is smooth in the parameters as long as this pattern
    /// does not change.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let caches = self.stem.iter().chain(self.blocks.iter().flat_map(|b| b.branch.iter().chain(&b.shortcut))).chain(&self.head);
        for c in caches {
            match c {
                LayerCache::Mask(m) => out.extend(m.iter().map(|&b| usize::from(b))),
                LayerCache::Pool(idx) => out.extend(idx),
                _ => {}
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// Indexed by `ParamId`.
    pub params: Vec<Tensor>,
    /// `∂ℓ/∂x_l` for `l = 0..=L`.
    pub activations: Vec<Tensor>,
    pub input: Tensor,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.params.iter().fold(0.0, |acc, g| acc + g.sum_sq()).sqrt()
    }

    /// L2 norm over the listed parameters taken together.
    pub fn norm_over(&self, ids: &[ParamId]) -> f64 {
        ids.iter().fold(0.0, |acc, id| acc + self.params[id.0].sum_sq()).sqrt()
    }
}

fn run_layers(
    net: &Network,
    layers: &[Layer],
    mut x: Tensor,
    train: bool,
    bn: &mut Vec<BnBatch>,
) -> Result<(Tensor, Vec<LayerCache>)> {
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (y, c) = layer.forward(net, x, train, bn)?;
        caches.push(c);
        x = y;
    }
    Ok((x, caches))
}

fn back_layers(
    net: &Network,
    layers: &[Layer],
    caches: &[LayerCache],
    mut g: Tensor,
    grads: &mut [Tensor],
) -> Result<Tensor> {
    for (layer, cache) in layers.iter().zip(caches).rev() {
        g = layer.backward(net, cache, g, grads)?;
    }
    Ok(g)
}

impl Network {
    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<Trace> {
        if !self.is_initialized() {
            return Err(FixupError::State("network parameters are not initialized".into()));
        }
        let expect = self.spec().input.batch_shape(input.rows());
        if input.shape() != expect.as_slice() {
            return Err(FixupError::dim(format!(
                "input batch shape {:?} does not match network input {:?}",
                input.shape(),
                expect
            )));
        }
        let train = mode == Mode::Train;
        let scale = self.spec().branch_output_scale;
        let residual = self.spec().residual;
        let mut bn = Vec::new();

        let (mut x, stem) = run_layers(self, &self.stem, input.clone(), train, &mut bn)?;
        let mut non_finite = !x.all_finite();
        let mut activations = Vec::with_capacity(self.blocks.len() + 1);
        activations.push(x.clone());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (h, branch) = run_layers(self, &block.branch, x.clone(), train, &mut bn)?;
            let (mut out, shortcut) = if !residual {
                (h, Vec::new())
            } else if block.shortcut.is_empty() {
                let mut s = x;
                s.axpy(1.0, &h)?;
                (s, Vec::new())
            } else {
                let (mut s, c) = run_layers(self, &block.shortcut, x, train, &mut bn)?;
                s.axpy(1.0, &h)?;
                (s, c)
            };
            if scale != 1.0 {
                out.scale_in_place(scale);
            }
            non_finite |= !out.all_finite();
            activations.push(out.clone());
            blocks.push(BlockCache { branch, shortcut });
            x = out;
        }
        let (logits, head) = run_layers(self, &self.head, x, train, &mut bn)?;
        non_finite |= !logits.all_finite();
        Ok(Trace { version: self.version(), activations, logits, non_finite, stem, blocks, head, bn })
    }

    /// Logits in eval mode.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input, Mode::Eval)?.logits)
    }

    /// Reverse-mode gradients of `Σ dlogits ⊙ logits`; pass `∂ℓ/∂z` as
    /// `dlogits`.
    pub fn backward(&self, trace: &Trace, dlogits: &Tensor) -> Result<Gradients> {
        if trace.version != self.version() {
            return Err(FixupError::State("trace is stale: parameters changed after the forward pass".into()));
        }
        if dlogits.shape() != trace.logits.shape() {
            return Err(FixupError::dim(format!(
                "logit gradient shape {:?} does not match logits {:?}",
                dlogits.shape(),
                trace.logits.shape()
            )));
        }
        let mut grads: Vec<Tensor> = self.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let scale = self.spec().branch_output_scale;
        let residual = self.spec().residual;
        let l_total = self.blocks.len();

        let mut g = back_layers(self, &self.head, &trace.head, dlogits.clone(), &mut grads)?;
        let mut act = vec![Tensor::scalar(0.0); l_total + 1];
        act[l_total] = g.clone();
        for l in (0..l_total).rev() {
            let block = &self.blocks[l];
            let cache = &trace.blocks[l];
            if scale != 1.0 {
                g.scale_in_place(scale);
            }
            let gb = back_layers(self, &block.branch, &cache.branch, g.clone(), &mut grads)?;
            g = if !residual {
                gb
            } else {
                let mut gs = if block.shortcut.is_empty() {
                    g
                } else {
                    back_layers(self, &block.shortcut, &cache.shortcut, g, &mut grads)?
                };
                gs.axpy(1.0, &gb)?;
                gs
            };
            act[l] = g.clone();
        }
        let input = back_layers(self, &self.stem, &trace.stem, g, &mut grads)?;
        Ok(Gradients { params: grads, activations: act, input })
    }

    /// Folds a train-mode trace's batch statistics into the running
    /// statistics: `running = 0.9·running + 0.1·batch`.
    pub fn commit_running_stats(&mut self, trace: &Trace) {
        let running = self.running_mut();
        for b in &trace.bn {
            let r = &mut running[b.stats];
            for (rm, m) in r.mean.iter_mut().zip(&b.mean) {
                *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * m;
            }
            for (rv, v) in r.var.iter_mut().zip(&b.var) {
                *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }

    /// Runs block `l` alone on `x` (eval mode) and returns
    /// `(branch output, block output)`.
    pub fn forward_block(&self, l: usize, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let block = &self.blocks[l];
        let mut bn = Vec::new();
        let (h, _) = run_layers(self, &block.branch, x.clone(), false, &mut bn)?;
        let mut out = if !self.spec().residual {
            h.clone()
        } else if block.shortcut.is_empty() {
            x.add(&h)?
        } else {
            let (s, _) = run_layers(self, &block.shortcut, x.clone(), false, &mut bn)?;
            s.add(&h)?
        };
        out.scale_in_place(self.spec().branch_output_scale);
        Ok((h, out))
    }

    /// Output of block `l`'s branch up to and including its `upto`-th weight
    /// layer (1-based), in eval mode.
    pub fn branch_prefix(&self, l: usize, x: &Tensor, upto: usize) -> Result<Tensor> {
        let layers = &self.blocks[l].branch;
        let mut seen = 0;
        let end = layers
            .iter()
            .position(|layer| {
                if matches!(layer, Layer::Linear { .. } | Layer::Conv { .. }) {
                    seen += 1;
                }
                seen == upto
            })
            .ok_or_else(|| FixupError::pre(format!("block {} has fewer than {upto} weight layers", l + 1)))?;
        let mut bn = Vec::new();
        Ok(run_layers(self, &layers[..=end], x.clone(), false, &mut bn)?.0)
    }

    /// Output of block `l`'s shortcut path (the input itself when it is an
    /// identity).
    pub fn shortcut_output(&self, l: usize, x: &Tensor) -> Result<Tensor> {
        let mut bn = Vec::new();
        Ok(run_layers(self, &self.blocks[l].shortcut, x.clone(), false, &mut bn)?.0)
    }

    /// Stem output `x_0` in eval mode.
    pub fn forward_stem(&self, input: &Tensor) -> Result<Tensor> {
        let mut bn = Vec::new();
        Ok(run_layers(self, &self.stem, input.clone(), false, &mut bn)?.0)
    }
}
