//! Numerical probes of what the initialization is supposed to guarantee.
//!
//! Each probe clones or borrows a network and reports measured quantities
//! next to the bound or prediction they are compared against. Nothing here
//! mutates the caller's network.

use crate::error::{FixupError, Result};
use crate::net::{cross_entropy, one_hot, Mode, Network, ParamId, PhSet};
use crate::tensor::{variance_sum, Tensor};

/// Relative slack used when comparing the two sides of an inequality.
pub const INEQUALITY_SLACK: f64 = 1e-8;

/// `lhs ≥ rhs − 1e-8·max(1, |rhs|)`.
pub fn holds_with_slack(lhs: f64, rhs: f64) -> bool {
    lhs >= rhs - INEQUALITY_SLACK * rhs.abs().max(1.0)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

/// Floor on the denominator of the relative error, so that gradients
/// dominated by finite-difference round-off are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
    /// Coordinates whose `±h` evaluations change the ReLU or max-pool
    /// pattern; the loss has a kink inside the stencil there.
    pub skipped: usize,
}

/// Compares every parameter gradient of the mean cross-entropy (train mode)
/// against fourth-order central differences with step `h`
/// (`θ ± h`, `θ ± 2h`). Coordinates where the stencil crosses a kink are
/// counted in `skipped` instead of compared.
pub fn gradient_check(net: &Network, input: &Tensor, labels: &[usize], h: f64) -> Result<GradCheck> {
    let y = one_hot(labels, net.spec().classes)?;
    let trace = net.forward(input, Mode::Train)?;
    let ce = cross_entropy(&trace.logits, &y)?;
    let grads = net.backward(&trace, &ce.dlogits)?;
    let mut probe = net.clone();
    let pattern = trace.activation_pattern();
    let mut loss_at = |id: ParamId, i: usize, v: f64| -> Result<(f64, bool)> {
        let old = probe.param(id).value.data()[i];
        probe.param_mut(id).value.data_mut()[i] = v;
        let t = probe.forward(input, Mode::Train)?;
        probe.param_mut(id).value.data_mut()[i] = old;
        Ok((cross_entropy(&t.logits, &y)?.mean, t.activation_pattern() == pattern))
    };
    let mut out = GradCheck { max_rel_err: 0.0, worst: (String::new(), 0), checked: 0, skipped: 0 };
    for id in net.param_ids() {
        for i in 0..net.param(id).value.len() {
            let v = net.param(id).value.data()[i];
            let mut f = [0.0; 4];
            let mut smooth = true;
            for (slot, k) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                let (l, same) = loss_at(id, i, v + k * h)?;
                *slot = l;
                smooth &= same;
            }
            if !smooth {
                out.skipped += 1;
                continue;
            }
            let fd = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * h);
            let an = grads.param(id).data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(GRADCHECK_FLOOR);
            if !(rel <= out.max_rel_err) {
                out.max_rel_err = rel;
                out.worst = (net.param(id).name.clone(), i);
            }
            out.checked += 1;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Variance profile

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceProfile {
    /// `Var[x_l]` (summed per-feature variance) for `l = 0..`, truncated
    /// before the first non-finite value.
    pub variances: Vec<f64>,
    /// Block index at which the variance first became non-finite.
    pub overflow_at: Option<usize>,
}

impl VarianceProfile {
    /// `log2(Var[x_{l+1}] / Var[x_l])` for each consecutive pair.
    pub fn log2_ratios(&self) -> Vec<f64> {
        self.variances.windows(2).map(|w| (w[1] / w[0]).log2()).collect()
    }

    pub fn mean_log2_ratio(&self) -> f64 {
        let r = self.log2_ratios();
        r.iter().sum::<f64>() / r.len() as f64
    }
}

pub const MIN_PROFILE_BATCH: usize = 64;

pub fn variance_profile(net: &Network, input: &Tensor) -> Result<VarianceProfile> {
    if input.rows() < MIN_PROFILE_BATCH {
        return Err(FixupError::pre(format!(
            "variance profile needs a batch of at least {MIN_PROFILE_BATCH}, got {}",
            input.rows()
        )));
    }
    let trace = net.forward(input, Mode::Eval)?;
    let mut variances = Vec::with_capacity(trace.activations.len());
    let mut overflow_at = None;
    for (l, x) in trace.activations.iter().enumerate() {
        let v = variance_sum(x)?;
        if !v.is_finite() {
            overflow_at = Some(l);
            break;
        }
        variances.push(v);
    }
    Ok(VarianceProfile { variances, overflow_at })
}

// ---------------------------------------------------------------------------
// Gradient lower bound per block

#[derive(Clone, Debug, PartialEq)]
pub struct BlockBoundRow {
    /// 1-based block index `i`; the bound is on the gradient at its input.
    pub block: usize,
    /// `‖∂ℓ/∂x_{i−1}‖`.
    pub lhs: f64,
    /// `(ℓ − H(p)) / ‖x_{i−1}‖`; NaN when skipped.
    pub rhs: f64,
    pub holds: bool,
    /// `‖x_{i−1}‖ = 0`.
    pub skipped: bool,
}

/// Evaluates the per-block gradient bound on a single example.
pub fn check_block_bound(net: &Network, example: &Tensor, label: usize) -> Result<Vec<BlockBoundRow>> {
    if example.rows() != 1 {
        return Err(FixupError::pre("the per-block bound is evaluated one example at a time"));
    }
    let trace = net.forward(example, Mode::Eval)?;
    let ce = cross_entropy(&trace.logits, &one_hot(&[label], net.spec().classes)?)?;
    let grads = net.backward(&trace, &ce.dlogits)?;
    let gap = ce.losses[0] - ce.entropy[0];
    let mut rows = Vec::with_capacity(net.num_blocks());
    for i in 1..=net.num_blocks() {
        let xn = trace.activations[i - 1].norm_l2();
        let lhs = grads.activations[i - 1].norm_l2();
        if xn == 0.0 {
            rows.push(BlockBoundRow { block: i, lhs, rhs: f64::NAN, holds: true, skipped: true });
            continue;
        }
        let rhs = gap / xn;
        rows.push(BlockBoundRow { block: i, lhs, rhs, holds: holds_with_slack(lhs, rhs), skipped: false });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Gradient lower bound per positively homogeneous set

#[derive(Clone, Debug, PartialEq)]
pub struct PhBoundRow {
    pub label: String,
    /// `‖∂ℓ_avg/∂θ_ph‖`.
    pub lhs: f64,
    /// `G(θ_ph)`; NaN when the set has zero norm.
    pub g: f64,
    /// `(mean max_i z_i − ln c) / ‖θ_ph‖` on this minibatch.
    pub bound_estimate: f64,
    pub holds: bool,
    /// `‖θ_ph‖ = 0`: the bound is undefined, not violated.
    pub undefined: bool,
}

/// `(E[max_i z_i] − ln c) / ‖θ_ph‖` with the expectation replaced by the
/// mean over the rows of `logits`.
pub fn estimate_bound(classes: usize, logits: &Tensor, theta_norm: f64) -> f64 {
    let m = logits.rows();
    let mean_max = (0..m).map(|i| logits.row(i).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))).sum::<f64>()
        / m as f64;
    (mean_max - (classes as f64).ln()) / theta_norm
}

pub fn check_ph_bound(net: &Network, input: &Tensor, labels: &[usize], set: &PhSet) -> Result<PhBoundRow> {
    let m = input.rows();
    if m < 1 || labels.len() != m {
        return Err(FixupError::pre("minibatch and labels must be non-empty and of equal length"));
    }
    let trace = net.forward(input, Mode::Eval)?;
    let ce = cross_entropy(&trace.logits, &one_hot(labels, net.spec().classes)?)?;
    let grads = net.backward(&trace, &ce.dlogits)?;
    let lhs = grads.norm_over(&set.members);
    let theta = set.norm(net);
    if theta == 0.0 {
        return Ok(PhBoundRow {
            label: set.label.clone(),
            lhs,
            g: f64::NAN,
            bound_estimate: f64::NAN,
            holds: true,
            undefined: true,
        });
    }
    let gap: f64 = ce.losses.iter().zip(&ce.entropy).map(|(l, h)| l - h).sum();
    let g = gap / (m as f64 * theta);
    Ok(PhBoundRow {
        label: set.label.clone(),
        lhs,
        g,
        bound_estimate: estimate_bound(net.spec().classes, &trace.logits, theta),
        holds: holds_with_slack(lhs, g),
        undefined: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpectationCheck {
    pub draws: usize,
    pub mean_g: f64,
    pub stderr_g: f64,
    pub mean_bound: f64,
    pub stderr_bound: f64,
    /// Mean and standard error of the paired difference `G − bound`.
    pub mean_gap: f64,
    pub stderr_gap: f64,
    /// `mean_gap ≥ −2·stderr_gap`.
    pub holds: bool,
}

/// Monte-Carlo comparison of `E[G]` with the expectation bound over fresh
/// weight draws. `make(d)` returns the `d`-th network; `set_label` picks the
/// p.h. set to evaluate in each.
pub fn ph_bound_expectation(
    make: &mut dyn FnMut(usize) -> Result<Network>,
    draws: usize,
    input: &Tensor,
    labels: &[usize],
    set_label: &str,
) -> Result<ExpectationCheck> {
    let mut gs = Vec::with_capacity(draws);
    let mut bs = Vec::with_capacity(draws);
    for d in 0..draws {
        let net = make(d)?;
        let set = net
            .ph_sets()
            .into_iter()
            .find(|s| s.label == set_label)
            .ok_or_else(|| FixupError::pre(format!("no p.h. set named {set_label}")))?;
        let row = check_ph_bound(&net, input, labels, &set)?;
        if row.undefined {
            return Err(FixupError::pre(format!("set {set_label} has zero norm; the expectation bound is undefined")));
        }
        gs.push(row.g);
        bs.push(row.bound_estimate);
    }
    let (mean_g, stderr_g) = mean_stderr(&gs);
    let (mean_bound, stderr_bound) = mean_stderr(&bs);
    let diffs: Vec<f64> = gs.iter().zip(&bs).map(|(g, b)| g - b).collect();
    let (mean_gap, stderr_gap) = mean_stderr(&diffs);
    Ok(ExpectationCheck {
        draws,
        mean_g,
        stderr_g,
        mean_bound,
        stderr_bound,
        mean_gap,
        stderr_gap,
        holds: mean_gap >= -2.0 * stderr_gap,
    })
}

/// Worst relative error of `logits(α·θ_ph) = α·logits(θ_ph)`.
pub fn ph_scaling_error(net: &Network, input: &Tensor, set: &PhSet, alpha: f64) -> Result<f64> {
    let base = net.logits(input)?.scale(alpha);
    let mut scaled = net.clone();
    scaled.scale_params(&set.members, alpha);
    let z = scaled.logits(input)?;
    let denom = base.max_abs();
    let diff = z.sub(&base)?.max_abs();
    Ok(if diff == 0.0 { 0.0 } else { diff / denom })
}

// ---------------------------------------------------------------------------
// Update scale

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateMeasurement {
    pub eta: f64,
    /// RMS over the batch of the per-example logit change.
    pub delta_norm: f64,
    /// `delta_norm` at `eta / 2`, used for the first-order check.
    pub half_delta_norm: f64,
    /// Per-block `‖Δf‖` when only that branch's parameters move; empty
    /// unless requested.
    pub branch_norms: Vec<f64>,
    /// Mean pairwise cosine of the per-branch logit changes, over pairs with
    /// nonzero vectors; `None` when fewer than two such branches exist.
    pub mean_pairwise_cosine: Option<f64>,
}

impl UpdateMeasurement {
    pub fn ratio(&self) -> f64 {
        self.delta_norm / self.eta
    }
}

/// Relative tolerance of the halving test.
pub const FIRST_ORDER_TOL: f64 = 0.05;

fn rms_rows(t: &Tensor) -> f64 {
    (t.sum_sq() / t.rows() as f64).sqrt()
}

fn logit_delta(net: &Network, grads: &[Tensor], ids: &[ParamId], eta: f64, input: &Tensor, base: &Tensor) -> Result<Tensor> {
    let mut moved = net.clone();
    for &id in ids {
        moved.param_mut(id).value.axpy(-eta, &grads[id.0])?;
    }
    moved.forward(input, Mode::Train)?.logits.sub(base)
}

/// RMS logit change after one plain SGD step of size `eta`, without the
/// first-order check.
pub fn logit_change(net: &Network, input: &Tensor, labels: &[usize], eta: f64) -> Result<f64> {
    let trace = net.forward(input, Mode::Train)?;
    let ce = cross_entropy(&trace.logits, &one_hot(labels, net.spec().classes)?)?;
    let grads = net.backward(&trace, &ce.dlogits)?;
    let all: Vec<ParamId> = net.param_ids().collect();
    Ok(rms_rows(&logit_delta(net, &grads.params, &all, eta, input, &trace.logits)?))
}

/// Exact logit change after one plain SGD step of size `eta` on the mean
/// cross-entropy of `(input, labels)`.
pub fn measure_update(
    net: &Network,
    input: &Tensor,
    labels: &[usize],
    eta: f64,
    per_branch: bool,
) -> Result<UpdateMeasurement> {
    let trace = net.forward(input, Mode::Train)?;
    let ce = cross_entropy(&trace.logits, &one_hot(labels, net.spec().classes)?)?;
    let grads = net.backward(&trace, &ce.dlogits)?;
    let all: Vec<ParamId> = net.param_ids().collect();
    let base = &trace.logits;

    let delta = logit_delta(net, &grads.params, &all, eta, input, base)?;
    let delta_norm = rms_rows(&delta);
    if eta == 0.0 {
        return Ok(UpdateMeasurement {
            eta,
            delta_norm,
            half_delta_norm: 0.0,
            branch_norms: Vec::new(),
            mean_pairwise_cosine: None,
        });
    }
    let half = rms_rows(&logit_delta(net, &grads.params, &all, eta / 2.0, input, base)?);
    let linear = delta_norm.is_finite() && half.is_finite() && {
        let r = delta_norm / (2.0 * half);
        (r - 1.0).abs() <= FIRST_ORDER_TOL || (delta_norm == 0.0 && half == 0.0)
    };
    if !linear {
        return Err(FixupError::StepTooLarge { suggested: eta / 10.0 });
    }

    let mut branch_norms = Vec::new();
    let mut cosine = None;
    if per_branch {
        let mut vecs = Vec::with_capacity(net.num_blocks());
        for l in 0..net.num_blocks() {
            let d = logit_delta(net, &grads.params, &net.branch_params(l), eta, input, base)?;
            branch_norms.push(rms_rows(&d));
            vecs.push(d);
        }
        let nonzero: Vec<&Tensor> = vecs.iter().filter(|v| v.norm_l2() > 0.0).collect();
        if nonzero.len() >= 2 {
            let norms: Vec<f64> = nonzero.iter().map(|v| v.norm_l2()).collect();
            let mut acc = 0.0;
            let mut pairs = 0usize;
            for i in 0..nonzero.len() {
                for j in i + 1..nonzero.len() {
                    acc += nonzero[i].dot(nonzero[j])? / (norms[i] * norms[j]);
                    pairs += 1;
                }
            }
            cosine = Some(acc / pairs as f64);
        }
    }
    Ok(UpdateMeasurement { eta, delta_norm, half_delta_norm: half, branch_norms, mean_pairwise_cosine: cosine })
}

#[derive(Clone, Debug)]
pub struct UpdateScaleRow {
    pub depth: usize,
    pub eta: f64,
    /// `Err` carries the reason the measurement failed (typically a step
    /// outside the first-order regime, or a non-finite result).
    pub result: std::result::Result<UpdateMeasurement, String>,
}

/// Runs [`measure_update`] on `make(L)` for every depth; failures are kept
/// as rows rather than aborting the sweep.
pub fn measure_update_scale(
    make: &mut dyn FnMut(usize) -> Result<Network>,
    depths: &[usize],
    eta: f64,
    input: &Tensor,
    labels: &[usize],
    per_branch: bool,
) -> Result<Vec<UpdateScaleRow>> {
    let mut rows = Vec::with_capacity(depths.len());
    for &depth in depths {
        let net = make(depth)?;
        let result = match measure_update(&net, input, labels, eta, per_branch) {
            Ok(m) => Ok(m),
            Err(e @ FixupError::StepTooLarge { .. }) => Err(e.to_string()),
            Err(e) => return Err(e),
        };
        rows.push(UpdateScaleRow { depth, eta, result });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Scalar branch model

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarBranch {
    /// `F(x) = (∏ a_i)·x`.
    pub f: f64,
    pub delta_formula: f64,
    pub delta_exact: f64,
    /// `(∏_{k≠j} a_k)·x` with `j` the first index of the minimum.
    pub constraint: f64,
    /// Two or more zero entries: every gradient term vanishes.
    pub stuck: bool,
}

fn prod_except(a: &[f64], skip: usize) -> f64 {
    a.iter().enumerate().filter(|&(k, _)| k != skip).fold(1.0, |p, (_, v)| p * v)
}

/// First-order and exact change of `F(x) = (∏ a_i)·x` after one SGD step on
/// every `a_i` with `∂ℓ/∂F = g` held fixed.
pub fn scalar_branch(a: &[f64], x: f64, g: f64, eta: f64) -> Result<ScalarBranch> {
    if a.is_empty() {
        return Err(FixupError::Domain("scalar branch needs at least one layer".into()));
    }
    if let Some(v) = a.iter().find(|v| !(**v >= 0.0)) {
        return Err(FixupError::Domain(format!("scalar branch weights must be nonnegative, got {v}")));
    }
    let f = a.iter().product::<f64>() * x;
    // F/a_i is read as ∏_{k≠i} a_k · x, which also covers a_i = 0.
    let partial: Vec<f64> = (0..a.len()).map(|i| prod_except(a, i) * x).collect();
    let delta_formula = -eta * g * partial.iter().map(|p| p * p).sum::<f64>();
    let updated: Vec<f64> = a.iter().zip(&partial).map(|(ai, p)| ai - eta * g * p).collect();
    let delta_exact = updated.iter().product::<f64>() * x - f;
    let j = a
        .iter()
        .enumerate()
        .fold(0, |best, (k, v)| if *v < a[best] { k } else { best });
    let constraint = prod_except(a, j) * x;
    let stuck = a.iter().filter(|v| **v == 0.0).count() >= 2;
    Ok(ScalarBranch { f, delta_formula, delta_exact, constraint, stuck })
}

/// Least-squares slope of `log|ΔF_exact − ΔF_formula|` against `log η`.
/// `None` when some remainder is exactly zero.
pub fn remainder_slope(a: &[f64], x: f64, g: f64, etas: &[f64]) -> Result<Option<f64>> {
    let mut pts = Vec::with_capacity(etas.len());
    for &eta in etas {
        let s = scalar_branch(a, x, g, eta)?;
        let r = (s.delta_exact - s.delta_formula).abs();
        if r == 0.0 {
            return Ok(None);
        }
        pts.push((eta.ln(), r.ln()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Ok(Some(sxy / sxx))
}

/// The branch multipliers Fixup produces for `L` branches of `m` layers:
/// `L^(−1/(2m−2))` for the first `m − 1`, zero for the last.
pub fn fixup_branch_model(num_branches: usize, m: usize) -> Result<Vec<f64>> {
    let s = crate::init::fixup_scale(num_branches, m)?;
    let mut a = vec![s; m];
    a[m - 1] = 0.0;
    Ok(a)
}

// ---------------------------------------------------------------------------

/// Everything a probe run measured, grouped by check.
#[derive(Clone, Debug, Default)]
pub struct ProbeReport {
    pub variance: Option<VarianceProfile>,
    pub block_bound: Vec<BlockBoundRow>,
    pub ph_bound: Vec<PhBoundRow>,
    pub update_scale: Vec<UpdateScaleRow>,
    pub scalar_branch: Vec<(Vec<f64>, ScalarBranch)>,
}

impl ProbeReport {
    /// Every row marked as holding really satisfies its inequality.
    pub fn is_consistent(&self) -> bool {
        self.block_bound.iter().all(|r| r.skipped || r.holds == holds_with_slack(r.lhs, r.rhs))
            && self.ph_bound.iter().all(|r| r.undefined || r.holds == holds_with_slack(r.lhs, r.g))
    }

    pub fn all_hold(&self) -> bool {
        self.block_bound.iter().all(|r| r.holds) && self.ph_bound.iter().all(|r| r.holds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{apply_fixup, apply_he, apply_sqrt_half, BaseInit, InitScheme};
    use crate::net::{InputShape, NetworkSpec};
    use crate::rng::{sample, Distribution, Rng};

    fn spec(l: usize, width: usize, bias: bool) -> NetworkSpec {
        NetworkSpec {
            input: InputShape::Flat(8),
            num_blocks: l,
            width,
            classes: 4,
            use_scalar_bias: bias,
            use_multiplier: bias,
            ..NetworkSpec::default()
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        sample(&Distribution::Normal { mean: 0.0, std: 1.0 }, shape, &mut Rng::new(seed)).unwrap()
    }

    fn he(l: usize, width: usize, seed: u64) -> Network {
        let mut net = Network::build(&spec(l, width, false)).unwrap();
        apply_he(&mut net, &mut Rng::new(seed)).unwrap();
        net
    }

    #[test]
    fn median_and_stderr() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let (m, s) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_check_small_net() {
        let mut net = Network::build(&spec(2, 4, true)).unwrap();
        apply_he(&mut net, &mut Rng::new(3)).unwrap();
        for id in net.param_ids().collect::<Vec<_>>() {
            if net.param(id).tags.kind.is_scalar() {
                net.param_mut(id).value.data_mut()[0] += 0.1 * (id.0 as f64 % 3.0 - 1.0);
            }
        }
        let r = gradient_check(&net, &randn(&[3, 8], 4), &[0, 1, 3], 1e-5).unwrap();
        assert!(r.max_rel_err <= 1e-6, "{r:?}");
    }

    #[test]
    fn fixup_profile_is_constant() {
        let mut net = Network::build(&spec(6, 16, true)).unwrap();
        apply_fixup(&mut net, &InitScheme::default(), &mut Rng::new(1)).unwrap();
        let p = variance_profile(&net, &randn(&[64, 8], 2)).unwrap();
        assert_eq!(p.variances.len(), 7);
        assert!(p.variances.iter().all(|v| *v == p.variances[0]));
        assert!(variance_profile(&net, &randn(&[63, 8], 2)).is_err());
    }

    #[test]
    fn he_profile_roughly_doubles() {
        let net = he(16, 64, 5);
        let p = variance_profile(&net, &randn(&[128, 8], 6)).unwrap();
        let r = p.mean_log2_ratio();
        assert!((0.6..=1.4).contains(&r), "{r}");
    }

    #[test]
    fn sqrt_half_profile_is_flat() {
        let mut s = spec(16, 64, false);
        s.branch_output_scale = 0.5f64.sqrt();
        let mut net = Network::build(&s).unwrap();
        apply_sqrt_half(&mut net, BaseInit::He, &mut Rng::new(7)).unwrap();
        let r = variance_profile(&net, &randn(&[128, 8], 8)).unwrap().mean_log2_ratio();
        assert!(r.abs() <= 0.25, "{r}");
    }

    #[test]
    fn overflow_truncates_profile() {
        let mut net = he(4, 8, 1);
        let w = net.find("block2.w1").unwrap();
        net.param_mut(w).value.scale_in_place(1e300);
        let p = variance_profile(&net, &randn(&[64, 8], 2)).unwrap();
        assert_eq!(p.overflow_at, Some(2));
        assert_eq!(p.variances.len(), 2);
    }

    #[test]
    fn block_bound_linear_hand_values() {
        // One block whose branch is zero, identity stem, classifier W.
        let s = NetworkSpec {
            input: InputShape::Flat(2),
            num_blocks: 1,
            width: 2,
            classes: 2,
            use_scalar_bias: false,
            use_multiplier: false,
            ..NetworkSpec::default()
        };
        let mut net = Network::build(&s).unwrap();
        apply_he(&mut net, &mut Rng::new(0)).unwrap();
        for (name, v) in [
            ("stem.w", Tensor::eye(2)),
            ("block1.w1", Tensor::zeros(&[2, 2])),
            ("block1.w2", Tensor::zeros(&[2, 2])),
            ("classifier.w", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]])),
        ] {
            let id = net.find(name).unwrap();
            net.param_mut(id).value = v;
        }
        let x = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let rows = check_block_bound(&net, &x, 1).unwrap();
        // z = (1, 0); p = (e, 1)/(e+1); ℓ = ln(1+e); ∂ℓ/∂x = Wᵀ(p − y).
        let e = 1f64.exp();
        let (p0, p1) = (e / (1.0 + e), 1.0 / (1.0 + e));
        let loss = (1.0 + e).ln();
        let h = -(p0 * p0.ln() + p1 * p1.ln());
        let grad = (p0 * p0 + (p1 - 1.0) * (p1 - 1.0)).sqrt();
        assert!((rows[0].rhs - (loss - h)).abs() < 1e-12);
        assert!((rows[0].lhs - grad).abs() < 1e-12);
        assert!(rows[0].holds);
    }

    #[test]
    fn block_bound_zero_logits_and_zero_input() {
        let mut net = Network::build(&spec(3, 8, true)).unwrap();
        apply_fixup(&mut net, &InitScheme::default(), &mut Rng::new(2)).unwrap();
        let rows = check_block_bound(&net, &randn(&[1, 8], 3), 2).unwrap();
        assert!(rows.iter().all(|r| r.rhs.abs() < 1e-12 && r.holds));
        let rows = check_block_bound(&he(2, 8, 1), &Tensor::zeros(&[1, 8]), 0).unwrap();
        assert!(rows.iter().all(|r| r.skipped));
    }

    #[test]
    fn block_bound_random_nets() {
        for seed in 0..10 {
            let net = he(2 + seed as usize % 3 * 3, 16, seed);
            let x = randn(&[1, 8], 100 + seed);
            for r in check_block_bound(&net, &x, seed as usize % 4).unwrap() {
                assert!(r.holds, "seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn ph_bound_classifier_set() {
        let net = he(4, 16, 9);
        let x = randn(&[32, 8], 10);
        let labels: Vec<usize> = (0..32).map(|i| i % 4).collect();
        for set in net.ph_sets() {
            assert!(set.warning.is_none());
            let row = check_ph_bound(&net, &x, &labels, &set).unwrap();
            assert!(row.holds, "{row:?}");
        }
    }

    #[test]
    fn ph_bound_zero_classifier_is_undefined() {
        let mut net = Network::build(&spec(2, 8, true)).unwrap();
        apply_fixup(&mut net, &InitScheme::default(), &mut Rng::new(2)).unwrap();
        let set = net.ph_sets().into_iter().find(|s| s.label == "classifier").unwrap();
        let row = check_ph_bound(&net, &randn(&[4, 8], 1), &[0, 1, 2, 3], &set).unwrap();
        assert!(row.undefined && row.holds);
    }

    #[test]
    fn ph_sets_scale_logits() {
        let net = he(3, 8, 4);
        let x = randn(&[5, 8], 5);
        for set in net.ph_sets() {
            for alpha in [0.5, 2.0, 7.0] {
                assert!(ph_scaling_error(&net, &x, &set, alpha).unwrap() <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_step_changes_nothing() {
        let net = he(3, 8, 4);
        let m = measure_update(&net, &randn(&[6, 8], 1), &[0, 1, 2, 3, 0, 1], 0.0, false).unwrap();
        assert_eq!(m.delta_norm, 0.0);
    }

    #[test]
    fn fixup_update_is_first_order_and_depth_free() {
        let x = randn(&[32, 8], 1);
        let labels: Vec<usize> = (0..32).map(|i| i % 4).collect();
        let mut make = |l: usize| -> Result<Network> {
            let mut net = Network::build(&spec(l, 16, true))?;
            apply_fixup(&mut net, &InitScheme::default(), &mut Rng::new(3))?;
            Ok(net)
        };
        let rows = measure_update_scale(&mut make, &[2, 16], 1e-4, &x, &labels, true).unwrap();
        let r: Vec<f64> = rows.iter().map(|r| r.result.as_ref().unwrap().ratio()).collect();
        assert!(r[0] > 0.0 && (r[0] / r[1] - 1.0).abs() < 0.5, "{r:?}");
    }

    #[test]
    fn he_branch_updates_align() {
        let net = he(8, 32, 11);
        let x = randn(&[32, 8], 12);
        let labels: Vec<usize> = (0..32).map(|i| i % 4).collect();
        let m = measure_update(&net, &x, &labels, 1e-5, true).unwrap();
        assert_eq!(m.branch_norms.len(), 8);
        assert!(m.mean_pairwise_cosine.unwrap() > 0.2, "{m:?}");
    }

    #[test]
    fn huge_step_is_rejected() {
        let net = he(8, 16, 1);
        let x = randn(&[8, 8], 2);
        let err = measure_update(&net, &x, &[0, 1, 2, 3, 0, 1, 2, 3], 10.0, false).unwrap_err();
        assert!(matches!(err, FixupError::StepTooLarge { suggested } if suggested == 1.0));
    }

    #[test]
    fn scalar_branch_examples() {
        let s = scalar_branch(&[1.0, 1.0], 1.0, 1.0, 1e-4).unwrap();
        assert!((s.delta_formula + 2e-4).abs() < 1e-18);
        assert!((s.delta_exact - s.delta_formula).abs() <= 1e-7);

        let eta = 1e-3;
        let s = scalar_branch(&[0.25, 0.0], 1.0, 1.0, eta).unwrap();
        assert_eq!(s.f, 0.0);
        assert!((s.delta_formula + 0.0625 * eta).abs() < 1e-18);
        // Exact: a' = (0.25, −0.25η), so ΔF = −0.0625η exactly.
        assert!((s.delta_exact - s.delta_formula).abs() < 1e-18);
        assert_eq!(s.constraint, 0.25);

        let s = scalar_branch(&[0.0, 0.5, 0.0], 2.0, 1.0, 0.1).unwrap();
        assert!(s.stuck && s.delta_formula == 0.0 && s.delta_exact == 0.0);
        assert!(matches!(scalar_branch(&[1.0, -0.1], 1.0, 1.0, 0.1), Err(FixupError::Domain(_))));
    }

    #[test]
    fn argmin_ties_take_first_index() {
        let s = scalar_branch(&[0.5, 2.0, 0.5], 1.0, 1.0, 0.0).unwrap();
        assert_eq!(s.constraint, 1.0);
    }

    #[test]
    fn remainder_is_second_order() {
        let slope = remainder_slope(&[0.8, 1.2], 1.1, 0.7, &[1e-2, 1e-3, 1e-4]).unwrap().unwrap();
        assert!((slope - 2.0).abs() <= 0.1, "{slope}");
    }

    #[test]
    fn fixup_model_meets_constraint() {
        for (l, m) in [(4, 2), (16, 3), (256, 4), (1000, 2)] {
            let a = fixup_branch_model(l, m).unwrap();
            let c = scalar_branch(&a, 1.0, 1.0, 0.0).unwrap().constraint;
            assert!((c * (l as f64).sqrt() - 1.0).abs() < 1e-12);
        }
    }
}
