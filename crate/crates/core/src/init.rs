//! Initialization schemes: He, Xavier, Fixup, `sqrt(1/2)` rescaling, LSUV.
//!
//! All schemes draw weights in registry order from a single stream, so two
//! schemes with the same seed produce bitwise identical draws for every
//! weight they leave unscaled (stem, shortcuts).

use crate::error::{FixupError, Result};
use crate::net::{Network, ParamId, ParamKind, Site};
use crate::rng::{sample, Distribution, Rng};
use crate::tensor::{variance_sum, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    He,
    Xavier,
    Fixup,
    Lsuv,
    SqrtHalf,
}

impl InitKind {
    pub fn name(self) -> &'static str {
        match self {
            InitKind::He => "he",
            InitKind::Xavier => "xavier",
            InitKind::Fixup => "fixup",
            InitKind::Lsuv => "lsuv",
            InitKind::SqrtHalf => "sqrt_half",
        }
    }

    pub fn parse(s: &str) -> Option<InitKind> {
        Some(match s {
            "he" => InitKind::He,
            "xavier" => InitKind::Xavier,
            "fixup" => InitKind::Fixup,
            "lsuv" => InitKind::Lsuv,
            "sqrt_half" => InitKind::SqrtHalf,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseInit {
    He,
    Xavier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitScheme {
    pub kind: InitKind,
    pub base: BaseInit,
    pub lsuv_tol: f64,
    pub lsuv_max_iter: usize,
    /// Extra factor on the Fixup branch scale (ablations use 0.1 and 10).
    pub fixup_scale_mult: f64,
    /// Fixup's default: the last layer of every branch starts at zero.
    /// When false every branch layer gets the rescaled base init instead.
    pub fixup_zero_last: bool,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme {
            kind: InitKind::Fixup,
            base: BaseInit::He,
            lsuv_tol: 0.05,
            lsuv_max_iter: 10,
            fixup_scale_mult: 1.0,
            fixup_zero_last: true,
        }
    }
}

impl InitScheme {
    pub fn new(kind: InitKind) -> Self {
        InitScheme { kind, ..InitScheme::default() }
    }
}

#[derive(Clone, Debug, Default)]
pub struct InitReport {
    pub warnings: Vec<String>,
    /// Filled by LSUV.
    pub lsuv: Option<LsuvReport>,
}

/// Branch-layer scale `L^(-1/(2m-2))`.
pub fn fixup_scale(num_branches: usize, branch_layers: usize) -> Result<f64> {
    if num_branches < 1 {
        return Err(FixupError::Domain("Fixup scale needs L >= 1".into()));
    }
    if branch_layers < 2 {
        return Err(FixupError::Domain(format!(
            "Fixup scale exponent is undefined for m = {branch_layers}; need m >= 2"
        )));
    }
    Ok((num_branches as f64).powf(-1.0 / (2.0 * branch_layers as f64 - 2.0)))
}

fn base_draw(base: BaseInit, fan_in: usize, fan_out: usize, shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let dist = match base {
        BaseInit::He => Distribution::Normal { mean: 0.0, std: (2.0 / fan_in as f64).sqrt() },
        BaseInit::Xavier => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Distribution::Uniform { low: -a, high: a }
        }
    };
    sample(&dist, shape, rng)
}

/// Standard values for everything that is not a weight: biases 0,
/// multipliers 1, BatchNorm γ = 1 and β = 0.
fn reset_non_weights(net: &mut Network) {
    let ids: Vec<ParamId> = net.param_ids().collect();
    for id in ids {
        let p = net.param_mut(id);
        match p.tags.kind {
            ParamKind::Weight => {}
            ParamKind::ScalarBias | ParamKind::BnBeta => p.value.data_mut().iter_mut().for_each(|v| *v = 0.0),
            ParamKind::Multiplier | ParamKind::BnGamma => p.value.data_mut().iter_mut().for_each(|v| *v = 1.0),
        }
    }
    net.reset_running_stats();
}

fn apply_base(net: &mut Network, base: BaseInit, rng: &mut Rng) -> Result<()> {
    let ids: Vec<ParamId> = net.param_ids().filter(|&id| net.param(id).tags.kind == ParamKind::Weight).collect();
    for id in ids {
        let (fi, fo) = net.param(id).fans();
        let shape = net.param(id).value.shape().to_vec();
        net.param_mut(id).value = base_draw(base, fi, fo, &shape, rng)?;
    }
    reset_non_weights(net);
    net.mark_initialized();
    Ok(())
}

/// Weights ~ N(0, 2/fan_in).
pub fn apply_he(net: &mut Network, rng: &mut Rng) -> Result<()> {
    apply_base(net, BaseInit::He, rng)
}

/// Weights ~ U(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn apply_xavier(net: &mut Network, rng: &mut Rng) -> Result<()> {
    apply_base(net, BaseInit::Xavier, rng)
}

/// Zero classifier, rescaled branch layers, zero last branch layer, unit
/// multipliers, zero biases. Shortcut and stem keep the base init.
pub fn apply_fixup(net: &mut Network, scheme: &InitScheme, rng: &mut Rng) -> Result<InitReport> {
    if net.spec().use_batchnorm {
        return Err(FixupError::config("Fixup cannot be applied to a BatchNorm network"));
    }
    apply_base(net, scheme.base, rng)?;
    let mut report = InitReport::default();
    let l_total = net.num_blocks();
    for l in 0..l_total {
        let layers = net.branch_weights(l);
        let m = layers.len();
        if m == 1 {
            report
                .warnings
                .push(format!("block {}: single-layer branch has no Fixup exponent; zero-initialized", l + 1));
            net.param_mut(layers[0]).value.scale_in_place(0.0);
            continue;
        }
        let s = fixup_scale(l_total, m)? * scheme.fixup_scale_mult;
        for (i, &id) in layers.iter().enumerate() {
            let last = i + 1 == m;
            let factor = if last && scheme.fixup_zero_last { 0.0 } else { s };
            net.param_mut(id).value.scale_in_place(factor);
        }
    }
    let cls: Vec<ParamId> = net.param_ids().filter(|&id| net.param(id).tags.is_classifier).collect();
    for id in cls {
        net.param_mut(id).value.scale_in_place(0.0);
    }
    Ok(report)
}

/// Base init for a network built with `branch_output_scale = sqrt(1/2)`.
pub fn apply_sqrt_half(net: &mut Network, base: BaseInit, rng: &mut Rng) -> Result<()> {
    let s = net.spec().branch_output_scale;
    if (s - 0.5f64.sqrt()).abs() > 1e-12 {
        return Err(FixupError::config(format!(
            "sqrt_half init needs branch_output_scale = sqrt(1/2), network has {s}"
        )));
    }
    apply_base(net, base, rng)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LsuvReport {
    /// Per-unit variance of each residual branch output after the procedure.
    pub block_variances: Vec<f64>,
    /// Cumulative rescale factor per weight, in processing order.
    pub scales: Vec<(String, f64)>,
    /// Rescale iterations per weight, in processing order.
    pub iterations: Vec<usize>,
    /// Weights whose output had zero variance on the probe batch.
    pub dead: Vec<String>,
}

fn per_unit_variance(t: &Tensor) -> Result<f64> {
    Ok(variance_sum(t)? / t.row_len() as f64)
}

/// Rescales `id` until `measure()` reports per-unit variance within `tol`
/// of 1. Returns `(cumulative factor, iterations, dead)`.
fn lsuv_layer(
    net: &mut Network,
    id: ParamId,
    tol: f64,
    max_iter: usize,
    measure: &dyn Fn(&Network) -> Result<Tensor>,
) -> Result<(f64, usize, bool)> {
    let mut total = 1.0;
    for it in 0..max_iter {
        let v = per_unit_variance(&measure(net)?)?;
        if v == 0.0 || !v.is_finite() {
            return Ok((total, it, true));
        }
        if (v - 1.0).abs() <= tol {
            return Ok((total, it, false));
        }
        let f = 1.0 / v.sqrt();
        net.param_mut(id).value.scale_in_place(f);
        total *= f;
    }
    Ok((total, max_iter, false))
}

/// Orthogonal init followed by layer-sequential unit-variance rescaling of
/// the stem, every branch and shortcut weight, and the classifier, measured
/// on `probe`.
pub fn apply_lsuv(
    net: &mut Network,
    probe: &Tensor,
    tol: f64,
    max_iter: usize,
    rng: &mut Rng,
) -> Result<LsuvReport> {
    if probe.rows() < 16 {
        return Err(FixupError::pre("LSUV needs a probe batch of at least 16 examples"));
    }
    let ids: Vec<ParamId> = net.param_ids().filter(|&id| net.param(id).tags.kind == ParamKind::Weight).collect();
    for id in ids {
        let shape = net.param(id).value.shape().to_vec();
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        let q = sample(&Distribution::Orthogonal { gain: 1.0 }, &[rows, cols], rng)?;
        net.param_mut(id).value = q.reshape(&shape)?;
    }
    reset_non_weights(net);
    net.mark_initialized();

    let mut report = LsuvReport::default();
    let record = |net: &Network, id: ParamId, (s, it, dead): (f64, usize, bool), report: &mut LsuvReport| {
        let name = net.param(id).name.clone();
        if dead {
            report.dead.push(name.clone());
        }
        report.scales.push((name, s));
        report.iterations.push(it);
    };

    let stem = net.find("stem.w").ok_or_else(|| FixupError::State("network has no stem".into()))?;
    let r = lsuv_layer(net, stem, tol, max_iter, &|n| n.forward_stem(probe))?;
    record(net, stem, r, &mut report);

    let mut x = net.forward_stem(probe)?;
    for l in 0..net.num_blocks() {
        let branch = net.branch_weights(l);
        for (i, &id) in branch.iter().enumerate() {
            let xin = x.clone();
            let r = lsuv_layer(net, id, tol, max_iter, &|n| n.branch_prefix(l, &xin, i + 1))?;
            record(net, id, r, &mut report);
        }
        let short: Vec<ParamId> = net
            .param_ids()
            .filter(|&id| net.param(id).tags.site == Site::Shortcut { block: l })
            .collect();
        for id in short {
            let xin = x.clone();
            let r = lsuv_layer(net, id, tol, max_iter, &|n| n.shortcut_output(l, &xin))?;
            record(net, id, r, &mut report);
        }
        let (branch_out, out) = net.forward_block(l, &x)?;
        report.block_variances.push(per_unit_variance(&branch_out)?);
        x = out;
    }
    let cls = net.find("classifier.w").ok_or_else(|| FixupError::State("network has no classifier".into()))?;
    let r = lsuv_layer(net, cls, tol, max_iter, &|n| n.logits(probe))?;
    record(net, cls, r, &mut report);
    Ok(report)
}

/// Dispatches on `scheme.kind`. LSUV needs a probe batch.
pub fn apply(net: &mut Network, scheme: &InitScheme, probe: Option<&Tensor>, rng: &mut Rng) -> Result<InitReport> {
    match scheme.kind {
        InitKind::He => apply_he(net, rng).map(|_| InitReport::default()),
        InitKind::Xavier => apply_xavier(net, rng).map(|_| InitReport::default()),
        InitKind::Fixup => apply_fixup(net, scheme, rng),
        InitKind::SqrtHalf => apply_sqrt_half(net, scheme.base, rng).map(|_| InitReport::default()),
        InitKind::Lsuv => {
            let probe = probe.ok_or_else(|| FixupError::config("LSUV needs a probe batch"))?;
            let rep = apply_lsuv(net, probe, scheme.lsuv_tol, scheme.lsuv_max_iter, rng)?;
            Ok(InitReport { warnings: Vec::new(), lsuv: Some(rep) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{cross_entropy, one_hot, InputShape, Mode, NetworkSpec};

    fn spec(l: usize, m: usize) -> NetworkSpec {
        NetworkSpec { input: InputShape::Flat(16), num_blocks: l, branch_layers: m, width: 100, ..NetworkSpec::default() }
    }

    fn std_of(t: &Tensor) -> f64 {
        let n = t.len() as f64;
        let m = t.sum() / n;
        (t.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    #[test]
    fn fixup_scale_values() {
        assert_eq!(fixup_scale(1, 2).unwrap(), 1.0);
        assert!((fixup_scale(16, 2).unwrap() - 0.25).abs() < 1e-15);
        assert!((fixup_scale(16, 3).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(fixup_scale(4, 1), Err(FixupError::Domain(_))));
    }

    #[test]
    fn he_std_and_defaults() {
        let mut net = Network::build(&spec(2, 2)).unwrap();
        apply_he(&mut net, &mut Rng::new(3)).unwrap();
        let w = &net.param(net.find("block1.w1").unwrap()).value;
        let target = (2.0 / 100.0f64).sqrt();
        let s = std_of(w);
        assert!(s >= 0.9 * target && s <= 1.1 * target, "{s}");
        for p in net.params() {
            match p.tags.kind {
                ParamKind::ScalarBias => assert_eq!(p.value.data()[0], 0.0),
                ParamKind::Multiplier => assert_eq!(p.value.data()[0], 1.0),
                _ => {}
            }
        }
        let mut again = Network::build(&spec(2, 2)).unwrap();
        apply_he(&mut again, &mut Rng::new(3)).unwrap();
        assert_eq!(net.flat_params(), again.flat_params());
    }

    #[test]
    fn xavier_bounds() {
        let mut net = Network::build(&spec(1, 2)).unwrap();
        apply_xavier(&mut net, &mut Rng::new(1)).unwrap();
        let w = &net.param(net.find("block1.w1").unwrap()).value;
        let a = (6.0 / 200.0f64).sqrt();
        assert!(w.max_abs() <= a);
        assert!(w.max_abs() > 0.9 * a);
    }

    #[test]
    fn fixup_rules() {
        let mut net = Network::build(&spec(16, 2)).unwrap();
        apply_fixup(&mut net, &InitScheme::default(), &mut Rng::new(5)).unwrap();
        for l in 0..16 {
            let ws = net.branch_weights(l);
            assert!(net.param(ws[1]).value.data().iter().all(|&v| v == 0.0));
        }
        let cls = net.find("classifier.w").unwrap();
        assert!(net.param(cls).value.data().iter().all(|&v| v == 0.0));
        // first-layer std ≈ 0.25·sqrt(2/fan_in), pooled over all branches
        let all: Vec<f64> = (0..16).flat_map(|l| net.param(net.branch_weights(l)[0]).value.data().to_vec()).collect();
        let s = std_of(&Tensor::new(vec![all.len()], all).unwrap());
        let target = 0.25 * (2.0 / 100.0f64).sqrt();
        assert!((s / target - 1.0).abs() < 0.02, "{}", s / target);

        let x = sample(&Distribution::Normal { mean: 0.0, std: 1.0 }, &[8, 16], &mut Rng::new(6)).unwrap();
        let t = net.forward(&x, Mode::Eval).unwrap();
        assert!(t.logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(t.activations[16], t.activations[0]);
        let ce = cross_entropy(&t.logits, &one_hot(&[0, 1, 2, 3, 4, 5, 6, 7], 10).unwrap()).unwrap();
        assert!((ce.mean - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fixup_keeps_stem_and_shortcut_draws_of_he() {
        let mut s = spec(4, 2);
        s.stage_shortcuts = vec![crate::net::ShortcutKind::Projection, crate::net::ShortcutKind::Projection];
        let mut a = Network::build(&s).unwrap();
        let mut b = Network::build(&s).unwrap();
        apply_he(&mut a, &mut Rng::new(11)).unwrap();
        apply_fixup(&mut b, &InitScheme::default(), &mut Rng::new(11)).unwrap();
        for name in ["stem.w", "block1.proj", "block3.proj"] {
            let id = a.find(name).unwrap();
            assert_eq!(a.param(id).value, b.param(id).value, "{name}");
        }
    }

    #[test]
    fn fixup_single_layer_branch_warns_and_zeroes() {
        let mut net = Network::build(&spec(3, 1)).unwrap();
        let rep = apply_fixup(&mut net, &InitScheme::default(), &mut Rng::new(0)).unwrap();
        assert_eq!(rep.warnings.len(), 3);
        assert!(net.param(net.branch_weights(0)[0]).value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixup_rejects_batchnorm() {
        let s = NetworkSpec { use_batchnorm: true, use_multiplier: false, ..spec(2, 2) };
        let mut net = Network::build(&s).unwrap();
        assert!(matches!(apply_fixup(&mut net, &InitScheme::default(), &mut Rng::new(0)), Err(FixupError::Config(_))));
    }

    #[test]
    fn sqrt_half_requires_matching_scale() {
        let mut net = Network::build(&spec(2, 2)).unwrap();
        assert!(apply_sqrt_half(&mut net, BaseInit::He, &mut Rng::new(0)).is_err());
        let s = NetworkSpec { branch_output_scale: 0.5f64.sqrt(), ..spec(2, 2) };
        let mut net = Network::build(&s).unwrap();
        apply_sqrt_half(&mut net, BaseInit::He, &mut Rng::new(0)).unwrap();
    }

    fn lsuv_net() -> (Network, Tensor) {
        let s = NetworkSpec { input: InputShape::Flat(16), num_blocks: 16, width: 32, ..NetworkSpec::default() };
        let probe = sample(&Distribution::Normal { mean: 0.0, std: 1.0 }, &[64, 16], &mut Rng::new(2)).unwrap();
        (Network::build(&s).unwrap(), probe)
    }

    #[test]
    fn lsuv_reaches_unit_variance() {
        let (mut net, probe) = lsuv_net();
        let rep = apply_lsuv(&mut net, &probe, 0.05, 10, &mut Rng::new(4)).unwrap();
        assert_eq!(rep.block_variances.len(), 16);
        assert!(rep.block_variances.iter().all(|v| (0.95..=1.05).contains(v)), "{:?}", rep.block_variances);
        assert!(rep.dead.is_empty());
    }

    #[test]
    fn lsuv_fixed_point_and_input_homogeneity() {
        let (mut net, probe) = lsuv_net();
        let a = apply_lsuv(&mut net, &probe, 0.05, 10, &mut Rng::new(4)).unwrap();
        let (mut net2, _) = lsuv_net();
        let b = apply_lsuv(&mut net2, &probe.scale(2.0), 0.05, 10, &mut Rng::new(4)).unwrap();
        // Doubling the input halves the stem factor; everything after sees
        // the same normalized signal.
        assert!((b.scales[0].1 / a.scales[0].1 - 0.5).abs() < 1e-12);
        for (x, y) in a.block_variances.iter().zip(&b.block_variances) {
            assert!((x - y).abs() < 1e-9);
        }
        // Re-running on an already normalized net needs no iterations.
        let mut again = net.clone();
        for &id in &[net.find("block3.w1").unwrap()] {
            let x = {
                let mut x = net.forward_stem(&probe).unwrap();
                for l in 0..2 {
                    x = net.forward_block(l, &x).unwrap().1;
                }
                x
            };
            let (s, it, dead) = lsuv_layer(&mut again, id, 0.05, 10, &|n| n.branch_prefix(2, &x, 1)).unwrap();
            assert_eq!((s, it, dead), (1.0, 0, false));
        }
    }

    #[test]
    fn lsuv_needs_probe_of_16() {
        let (mut net, _) = lsuv_net();
        let small = Tensor::zeros(&[8, 16]);
        assert!(apply_lsuv(&mut net, &small, 0.05, 10, &mut Rng::new(0)).is_err());
    }
}
