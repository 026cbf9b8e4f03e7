//! Minibatch SGD with momentum, weight decay, per-group learning rates,
//! Mixup and divergence detection.

use crate::data::{Dataset, Split};
use crate::error::{FixupError, Result};
use crate::net::{cross_entropy, one_hot, soft_cross_entropy, Mode, Network, ParamKind};
use crate::probe::logit_change;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `gamma` at the start of each listed epoch (0-based).
    Step { milestones: Vec<usize>, gamma: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning-rate factor for scalar biases and multipliers.
    pub scalar_lr_multiplier: f64,
    /// Beta parameter for Mixup; 0 disables it.
    pub mixup_alpha: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Emit a record every this many steps (0: epoch records only).
    pub log_every: usize,
    /// Apply weight decay to scalar biases, multipliers and BatchNorm
    /// parameters too.
    pub decay_scalars: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 1,
            batch_size: 128,
            scalar_lr_multiplier: 1.0,
            mixup_alpha: 0.0,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            log_every: 100,
            decay_scalars: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(FixupError::config("lr must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FixupError::config("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.scalar_lr_multiplier >= 0.0) || !(self.mixup_alpha >= 0.0) {
            return Err(FixupError::config("weight_decay, scalar_lr_multiplier and mixup_alpha must be >= 0"));
        }
        if self.batch_size < 1 {
            return Err(FixupError::config("batch_size must be >= 1"));
        }
        if let LrSchedule::Step { gamma, .. } = self.lr_schedule {
            if !(gamma > 0.0) {
                return Err(FixupError::config("lr schedule gamma must be > 0"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match &self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Step { milestones, gamma } => {
                self.lr * gamma.powi(milestones.iter().filter(|&&m| m <= epoch).count() as i32)
            }
        }
    }
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(net: &Network) -> Self {
        SgdState { velocity: net.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }
}

/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr_group·v`. Weight decay only touches
/// weights unless `decay_scalars` is set; scalar parameters use
/// `lr·scalar_lr_multiplier`.
pub fn sgd_step(net: &mut Network, grads: &[Tensor], state: &mut SgdState, cfg: &TrainConfig, lr: f64) -> Result<()> {
    if grads.len() != net.params().len() || state.velocity.len() != grads.len() {
        return Err(FixupError::Consistency(format!(
            "{} gradients and {} momentum buffers for {} parameters",
            grads.len(),
            state.velocity.len(),
            net.params().len()
        )));
    }
    for id in net.param_ids().collect::<Vec<_>>() {
        let g = &grads[id.0];
        let p = net.param(id);
        if g.shape() != p.value.shape() {
            return Err(FixupError::Consistency(format!("gradient for {} has the wrong shape", p.name)));
        }
        let kind = p.tags.kind;
        let decay = if kind == ParamKind::Weight || cfg.decay_scalars { cfg.weight_decay } else { 0.0 };
        let group_lr = if kind == ParamKind::ScalarBias || kind == ParamKind::Multiplier {
            lr * cfg.scalar_lr_multiplier
        } else {
            lr
        };
        let v = &mut state.velocity[id.0];
        {
            let theta = p.value.data();
            for ((vi, gi), ti) in v.data_mut().iter_mut().zip(g.data()).zip(theta) {
                *vi = cfg.momentum * *vi + (gi + decay * ti);
            }
        }
        let v = v.clone();
        net.param_mut(id).value.axpy(-group_lr, &v)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixed {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub lambda: f64,
    /// Partner of each example.
    pub partner: Vec<usize>,
}

/// Mixes each example with its partner under a fixed `lambda`.
pub fn mix_with(inputs: &Tensor, targets: &Tensor, lambda: f64, partner: &[usize]) -> Result<Mixed> {
    if partner.len() != inputs.rows() || targets.rows() != inputs.rows() {
        return Err(FixupError::dim("mixup partner, inputs and targets must have the same length"));
    }
    let mix = |t: &Tensor| -> Result<Tensor> {
        let mut out = t.scale(lambda);
        out.axpy(1.0 - lambda, &t.select_rows(partner))?;
        Ok(out)
    };
    Ok(Mixed { inputs: mix(inputs)?, targets: mix(targets)?, lambda, partner: partner.to_vec() })
}

/// Draws `λ ~ Beta(α, α)` once and a random in-batch partner permutation.
pub fn mixup_batch(inputs: &Tensor, targets: &Tensor, alpha: f64, rng: &mut Rng) -> Result<Mixed> {
    if !(alpha > 0.0) {
        return Err(FixupError::config(format!("mixup alpha must be > 0, got {alpha}")));
    }
    if inputs.rows() < 2 {
        return Err(FixupError::pre("mixup needs a batch of at least 2"));
    }
    let lambda = rng.beta(alpha, alpha)?;
    let partner = rng.permutation(inputs.rows());
    mix_with(inputs, targets, lambda, &partner)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    (1..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Target-weighted accuracy: `Σ_i y_i[argmax z_i]` over the batch.
    pub correct: f64,
    pub grad_norm: f64,
    pub non_finite: bool,
}

/// One forward/backward/update on soft targets.
pub fn train_step(
    net: &mut Network,
    state: &mut SgdState,
    inputs: &Tensor,
    targets: &Tensor,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepOutcome> {
    let trace = net.forward(inputs, Mode::Train)?;
    let ce = soft_cross_entropy(&trace.logits, targets)?;
    let correct = (0..targets.rows()).map(|i| targets.row(i)[argmax(trace.logits.row(i))]).sum();
    if trace.non_finite || !ce.mean.is_finite() {
        return Ok(StepOutcome { loss: ce.mean, correct, grad_norm: f64::NAN, non_finite: true });
    }
    let grads = net.backward(&trace, &ce.dlogits)?;
    let grad_norm = grads.global_norm();
    net.commit_running_stats(&trace);
    sgd_step(net, &grads.params, state, cfg, lr)?;
    Ok(StepOutcome { loss: ce.mean, correct, grad_norm, non_finite: !grad_norm.is_finite() })
}

/// Mean cross-entropy and accuracy in eval mode.
pub fn evaluate(net: &Network, split: &Split) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Err(FixupError::pre("cannot evaluate an empty split"));
    }
    const CHUNK: usize = 256;
    let n = split.len();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let (x, y) = split.batch(&idx);
        let z = net.logits(&x)?;
        let ce = cross_entropy(&z, &one_hot(&y, net.spec().classes)?)?;
        loss_sum += ce.losses.iter().sum::<f64>();
        correct += y.iter().enumerate().filter(|&(i, &l)| argmax(z.row(i)) == l).count();
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub depth: usize,
    pub init: String,
    pub lr: f64,
    /// 1-based epoch in progress.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Running mean over the epoch's minibatches so far.
    pub train_loss: f64,
    pub train_acc: f64,
    /// Filled on epoch records; NaN on intermediate records.
    pub test_acc: f64,
    pub grad_norm: f64,
    /// RMS logit change of one plain SGD step at the current lr on the
    /// current batch.
    pub update_norm: f64,
    pub diverged: bool,
}

/// Identifies a run in its records.
#[derive(Clone, Debug, PartialEq)]
pub struct RunInfo {
    pub run_id: String,
    pub depth: usize,
    pub init: String,
}

/// Minibatch index lists for one epoch: full batches in shuffled order;
/// the remainder is dropped unless the split is smaller than one batch.
fn epoch_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let order = rng.permutation(n);
    if n < batch {
        return vec![order];
    }
    order.chunks_exact(batch).map(|c| c.to_vec()).collect()
}

/// Trains `net` in place. Records are emitted every `log_every` steps and
/// at the end of every epoch; a non-finite loss or activation ends the run
/// with a final record marked diverged.
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig, info: &RunInfo) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(FixupError::config("dataset has an empty train or test split"));
    }
    let mut root = Rng::new(cfg.seed);
    let mut order_rng = root.fork(1);
    let mut mix_rng = root.fork(2);
    let mut state = SgdState::new(net);
    let mut records = Vec::new();
    let mut step = 0usize;
    let classes = data.classes;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut loss_sum, mut correct, mut seen, mut batches) = (0.0, 0.0, 0usize, 0usize);
        let mut last = None;
        let record = |step: usize, loss: f64, acc: f64, test: f64, grad: f64, upd: f64, div: bool| MetricsRecord {
            run_id: info.run_id.clone(),
            depth: info.depth,
            init: info.init.clone(),
            lr,
            epoch: epoch + 1,
            step,
            train_loss: loss,
            train_acc: acc,
            test_acc: test,
            grad_norm: grad,
            update_norm: upd,
            diverged: div,
        };
        for idx in epoch_batches(data.train.len(), cfg.batch_size, &mut order_rng) {
            let (x, y) = data.train.batch(&idx);
            let hard = one_hot(&y, classes)?;
            let (x, t) = if cfg.mixup_alpha > 0.0 && x.rows() >= 2 {
                let m = mixup_batch(&x, &hard, cfg.mixup_alpha, &mut mix_rng)?;
                (m.inputs, m.targets)
            } else {
                (x, hard)
            };
            let out = train_step(net, &mut state, &x, &t, cfg, lr)?;
            step += 1;
            batches += 1;
            loss_sum += out.loss;
            correct += out.correct;
            seen += idx.len();
            if out.non_finite {
                records.push(record(step, out.loss, correct / seen as f64, f64::NAN, out.grad_norm, f64::NAN, true));
                return Ok(records);
            }
            if cfg.log_every > 0 && step.is_multiple_of(cfg.log_every) {
                let upd = logit_change(net, &x, &y, lr)?;
                records.push(record(
                    step,
                    loss_sum / batches as f64,
                    correct / seen as f64,
                    f64::NAN,
                    out.grad_norm,
                    upd,
                    false,
                ));
            }
            last = Some((x, y, out.grad_norm));
        }
        let (test_loss, test_acc) = evaluate(net, &data.test)?;
        let (upd, grad) = match &last {
            Some((x, y, g)) => (logit_change(net, x, y, lr)?, *g),
            None => (f64::NAN, f64::NAN),
        };
        let diverged = !test_loss.is_finite();
        let (tl, ta) = if batches > 0 { (loss_sum / batches as f64, correct / seen as f64) } else { (f64::NAN, f64::NAN) };
        records.push(record(step, tl, ta, test_acc, grad, upd, diverged));
        if diverged {
            return Ok(records);
        }
    }
    Ok(records)
}
