//! The `fixup` command line: `train`, `sweep-depth`, `probe` and `verify`.
//!
//! Every command writes CSV. The first lines are the resolved
//! configuration as `# key = value` comments, followed by a fixed header.
//! Exit codes: 0 success, 1 failed check, 2 configuration error, 3 I/O or
//! input-format error.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{input_shape, parse_config, Method, RunConfig};
use crate::data::Dataset;
use crate::error::{FixupError, Result};
use crate::init::{apply, apply_he, apply_lsuv, InitKind, InitReport};
use crate::net::{cross_entropy, one_hot, soft_cross_entropy, BlockKind, InputShape, Network, NetworkSpec, ParamKind};
use crate::probe;
use crate::rng::{sample, Distribution, Rng};
use crate::tensor::Tensor;
use crate::train::{self, mix_with, train_step, MetricsRecord, RunInfo, SgdState, TrainConfig};

pub const METRICS_HEADER: &str =
    "run_id,depth,init,lr,epoch,step,train_loss,train_acc,test_acc,grad_norm,update_norm,diverged";
pub const CHECK_HEADER: &str = "check,seed,item,lhs,rhs,pass";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "fixup", version, about = "Fixup initialization workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Configuration file (`section.key = value` lines); defaults if absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV path; overrides `run.out`. Standard output if neither is set.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run with this single seed instead of `run.seeds`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the invariant suite; exit 1 if any check fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Print check names and exit.
        #[arg(long)]
        list: bool,
    },
    /// Train every (depth, init) pair for the configured epochs and report
    /// the final record of each run.
    SweepDepth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the configured network and stream metrics records.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Variance profile, gradient bounds, update scale and scalar-branch
    /// checks on the configured network.
    Probe {
        #[command(flatten)]
        common: Common,
    },
}

// ---------------------------------------------------------------------------
// CSV

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

pub fn metrics_row(r: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.run_id,
        r.depth,
        r.init,
        fmt_f(r.lr),
        r.epoch,
        r.step,
        fmt_f(r.train_loss),
        fmt_f(r.train_acc),
        fmt_f(r.test_acc),
        fmt_f(r.grad_norm),
        fmt_f(r.update_norm),
        r.diverged
    )
}

/// Parses the records of a metrics CSV, skipping `#` comments and the
/// header.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => return Err(FixupError::Format(format!("unexpected metrics header {other:?}"))),
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 12 {
                return Err(FixupError::Format(format!("expected 12 fields, got {}: {l:?}", f.len())));
            }
            let p = |s: &str| s.parse::<f64>().map_err(|e| FixupError::Format(format!("{s:?}: {e}")));
            let u = |s: &str| s.parse::<usize>().map_err(|e| FixupError::Format(format!("{s:?}: {e}")));
            Ok(MetricsRecord {
                run_id: f[0].into(),
                depth: u(f[1])?,
                init: f[2].into(),
                lr: p(f[3])?,
                epoch: u(f[4])?,
                step: u(f[5])?,
                train_loss: p(f[6])?,
                train_acc: p(f[7])?,
                test_acc: p(f[8])?,
                grad_norm: p(f[9])?,
                update_norm: p(f[10])?,
                diverged: f[11]
                    .parse()
                    .map_err(|_| FixupError::Format(format!("bad diverged field {:?}", f[11])))?,
            })
        })
        .collect()
}

/// One row of a check report.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub check: String,
    pub seed: u64,
    pub item: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(check: &str, seed: u64, item: impl Into<String>, lhs: f64, rhs: f64, pass: bool) -> Self {
        CheckRow { check: check.into(), seed, item: item.into(), lhs, rhs, pass }
    }

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.check, self.seed, self.item, fmt_f(self.lhs), fmt_f(self.rhs), self.pass)
    }
}

fn document(cfg: &RunConfig, header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = cfg.echo();
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// Runs

/// Seeds used for the dataset, the initialization and the trainer of one
/// run, all derived from the run seed.
fn init_rng(seed: u64) -> Rng {
    Rng::new(seed).fork(101)
}

pub fn run_id(method: Method, depth: usize, seed: u64) -> String {
    format!("{}-L{depth}-s{seed}", method.name())
}

/// Builds and initializes the network for `method` at `depth` on `data`.
pub fn build_network(cfg: &RunConfig, method: Method, depth: usize, data: &Dataset, seed: u64) -> Result<(Network, InitReport)> {
    let (spec, scheme) = cfg.resolve(method, depth, input_shape(data)?, data.classes)?;
    let mut net = Network::build(&spec)?;
    let probe_batch = (scheme.kind == InitKind::Lsuv).then(|| {
        let n = data.train.len().min(256);
        data.train.inputs.select_rows(&(0..n).collect::<Vec<_>>())
    });
    let report = apply(&mut net, &scheme, probe_batch.as_ref(), &mut init_rng(seed))?;
    Ok((net, report))
}

fn train_cfg(cfg: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.train.clone() }
}

/// Trains one network and returns its records.
pub fn train_one(cfg: &RunConfig, method: Method, depth: usize, data: &Dataset, seed: u64) -> Result<Vec<MetricsRecord>> {
    let (mut net, _) = build_network(cfg, method, depth, data, seed)?;
    let info = RunInfo { run_id: run_id(method, depth, seed), depth, init: method.name().into() };
    train::train(&mut net, data, &train_cfg(cfg, seed), &info)
}

/// `train`: the configured method at `arch.blocks`, every seed.
pub fn run_train(cfg: &RunConfig) -> Result<String> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let data = cfg.load_data(seed)?;
        for r in train_one(cfg, cfg.method, cfg.arch.num_blocks, &data, seed)? {
            rows.push(metrics_row(&r));
        }
    }
    Ok(document(cfg, METRICS_HEADER, rows))
}

/// `sweep-depth`: the last record of every (depth, init, seed) run, in
/// that order.
pub fn run_sweep(cfg: &RunConfig) -> Result<String> {
    let data: Vec<Dataset> = cfg.seeds.iter().map(|&s| cfg.load_data(s)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &depth in &cfg.sweep_depths {
        for &method in &cfg.sweep_methods {
            for (&seed, d) in cfg.seeds.iter().zip(&data) {
                let recs = train_one(cfg, method, depth, d, seed)?;
                if let Some(last) = recs.last() {
                    rows.push(metrics_row(last));
                }
            }
        }
    }
    Ok(document(cfg, METRICS_HEADER, rows))
}

fn first_rows(data: &Dataset, n: usize) -> (Tensor, Vec<usize>) {
    let n = n.min(data.train.len());
    data.train.batch(&(0..n).collect::<Vec<_>>())
}

/// `probe`: measurements on the configured network, one section per check.
pub fn run_probe(cfg: &RunConfig) -> Result<String> {
    let mut rows: Vec<CheckRow> = Vec::new();
    for &seed in &cfg.seeds {
        let data = cfg.load_data(seed)?;
        let (net, _) = build_network(cfg, cfg.method, cfg.arch.num_blocks, &data, seed)?;
        let (x, y) = first_rows(&data, cfg.probe.batch);

        if x.rows() >= probe::MIN_PROFILE_BATCH {
            let prof = probe::variance_profile(&net, &x)?;
            for (l, v) in prof.variances.iter().enumerate() {
                rows.push(CheckRow::new("variance", seed, format!("x{l}"), *v, prof.variances[0], true));
            }
            if let Some(at) = prof.overflow_at {
                rows.push(CheckRow::new("variance", seed, format!("overflow@x{at}"), f64::INFINITY, f64::NAN, false));
            }
        }
        for r in probe::check_block_bound(&net, &x.select_rows(&[0]), y[0])? {
            rows.push(CheckRow::new("grad_bound_block", seed, format!("block{}", r.block), r.lhs, r.rhs, r.holds));
        }
        for set in net.ph_sets() {
            let r = probe::check_ph_bound(&net, &x, &y, &set)?;
            rows.push(CheckRow::new("grad_bound_ph", seed, r.label, r.lhs, r.g, r.holds));
        }
        let mut make = |depth: usize| build_network(cfg, cfg.method, depth, &data, seed).map(|(n, _)| n);
        let (xu, yu) = first_rows(&data, cfg.probe.batch.min(64));
        for row in probe::measure_update_scale(&mut make, &cfg.probe.depths, cfg.probe.eta, &xu, &yu, true)? {
            match row.result {
                Ok(m) => rows.push(CheckRow::new(
                    "update_scale",
                    seed,
                    format!("L={}", row.depth),
                    m.ratio(),
                    m.mean_pairwise_cosine.unwrap_or(f64::NAN),
                    true,
                )),
                Err(_) => {
                    rows.push(CheckRow::new("update_scale", seed, format!("L={}", row.depth), f64::NAN, f64::NAN, false))
                }
            }
        }
        let m = cfg.arch.branch_layers.max(2);
        let a = probe::fixup_branch_model(cfg.arch.num_blocks, m)?;
        let s = probe::scalar_branch(&a, 1.0, 1.0, cfg.probe.eta)?;
        rows.push(CheckRow::new(
            "scalar_branch",
            seed,
            "fixup_model",
            s.constraint * (cfg.arch.num_blocks as f64).sqrt(),
            1.0,
            (s.constraint * (cfg.arch.num_blocks as f64).sqrt() - 1.0).abs() <= 0.01,
        ));
        if cfg.probe.curve {
            for r in train_one(cfg, cfg.method, cfg.arch.num_blocks, &data, seed)? {
                rows.push(CheckRow::new("curve", seed, format!("step{}", r.step), r.train_acc, r.train_loss, !r.diverged));
            }
        }
    }
    Ok(document(cfg, CHECK_HEADER, rows.iter().map(CheckRow::to_csv)))
}

// ---------------------------------------------------------------------------
// Verify

pub const VERIFY_CHECKS: &[&str] = &[
    "gradcheck",
    "grad_bound_block",
    "grad_bound_ph",
    "grad_bound_expectation",
    "ph_scaling",
    "fixup_identity",
    "fixup_constraint",
    "scalar_branch_remainder",
    "update_scale",
    "lsuv",
    "mixup",
];

/// A labelled network with an input batch and its labels.
pub type GradcheckCase = (String, Network, Tensor, Vec<usize>);

/// Tiny networks covering both block kinds, BatchNorm, biases and
/// multipliers, with every scalar moved away from its initial value.
pub fn gradcheck_nets(seed: u64) -> Result<Vec<GradcheckCase>> {
    let mut rng = Rng::new(seed).fork(7);
    let mut out = Vec::new();
    for (kind, bn, scalars) in [
        (BlockKind::Mlp, false, true),
        (BlockKind::Mlp, false, false),
        (BlockKind::Mlp, true, false),
        (BlockKind::ConvBasic, false, true),
        (BlockKind::ConvBasic, true, false),
    ] {
        let input = match kind {
            BlockKind::Mlp => InputShape::Flat(5),
            BlockKind::ConvBasic => InputShape::Image { channels: 2, height: 4, width: 4 },
        };
        let spec = NetworkSpec {
            input,
            num_blocks: 2,
            width: if kind == BlockKind::Mlp { 4 } else { 2 },
            block_kind: kind,
            classes: 3,
            use_batchnorm: bn,
            use_scalar_bias: scalars || bn,
            use_multiplier: scalars,
            stage_shortcuts: if kind == BlockKind::ConvBasic {
                vec![crate::net::ShortcutKind::Identity, crate::net::ShortcutKind::Projection]
            } else {
                vec![crate::net::ShortcutKind::Identity]
            },
            ..NetworkSpec::default()
        };
        let mut net = Network::build(&spec)?;
        apply_he(&mut net, &mut rng)?;
        for id in net.param_ids().collect::<Vec<_>>() {
            if net.param(id).tags.kind != ParamKind::Weight {
                for v in net.param_mut(id).value.data_mut() {
                    *v += 0.2 * rng.normal();
                }
            }
        }
        let n = 4;
        let x = sample(&Distribution::Normal { mean: 0.0, std: 1.0 }, &input.batch_shape(n), &mut rng)?;
        let y: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let label = format!(
            "{}{}{}",
            if kind == BlockKind::Mlp { "mlp" } else { "conv" },
            if bn { "+bn" } else { "" },
            if scalars { "+scalars" } else { "" }
        );
        out.push((label, net, x, y));
    }
    Ok(out)
}

/// Bias-free He-initialized copy of the configured architecture.
fn bias_free_he(cfg: &RunConfig, data: &Dataset, seed: u64) -> Result<Network> {
    let (spec, _) = cfg.resolve(Method::Init(InitKind::He), cfg.arch.num_blocks, input_shape(data)?, data.classes)?;
    let mut net = Network::build(&spec)?;
    apply_he(&mut net, &mut init_rng(seed))?;
    Ok(net)
}

/// Update-scale check: networks of the configured method at each depth
/// take `warmup_steps` SGD steps at the training learning rate, then the
/// logit change of one step of size `probe.eta` is measured.
pub fn update_scale_after_warmup(cfg: &RunConfig, data: &Dataset, seed: u64) -> Result<Vec<(usize, Option<f64>)>> {
    let (xu, yu) = first_rows(data, 64);
    let mut out = Vec::new();
    for &depth in &cfg.probe.depths {
        let (mut net, _) = build_network(cfg, cfg.method, depth, data, seed)?;
        let tc = train_cfg(cfg, seed);
        let mut state = SgdState::new(&net);
        let mut order = Rng::new(seed).fork(3);
        let mut ok = true;
        for _ in 0..cfg.probe.warmup_steps {
            let idx: Vec<usize> = (0..tc.batch_size.min(data.train.len())).map(|_| order.below(data.train.len())).collect();
            let (x, y) = data.train.batch(&idx);
            let out = train_step(&mut net, &mut state, &x, &one_hot(&y, data.classes)?, &tc, tc.lr)?;
            if out.non_finite {
                ok = false;
                break;
            }
        }
        let ratio = if ok {
            match probe::measure_update(&net, &xu, &yu, cfg.probe.eta, false) {
                Ok(m) if m.delta_norm.is_finite() => Some(m.ratio()),
                Ok(_) | Err(FixupError::StepTooLarge { .. }) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        out.push((depth, ratio));
    }
    Ok(out)
}

/// Runs one named check for one seed.
pub fn verify_check(name: &str, cfg: &RunConfig, data: &Dataset, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    match name {
        "gradcheck" => {
            for (label, net, x, y) in gradcheck_nets(seed)? {
                let r = probe::gradient_check(&net, &x, &y, 1e-5)?;
                rows.push(CheckRow::new(name, seed, label, r.max_rel_err, 1e-6, r.max_rel_err <= 1e-6));
            }
        }
        "grad_bound_block" => {
            let net = bias_free_he(cfg, data, seed)?;
            for i in 0..5.min(data.train.len()) {
                let (x, y) = data.train.batch(&[i]);
                for r in probe::check_block_bound(&net, &x, y[0])? {
                    rows.push(CheckRow::new(name, seed, format!("ex{i}/block{}", r.block), r.lhs, r.rhs, r.holds));
                }
            }
        }
        "grad_bound_ph" => {
            let net = bias_free_he(cfg, data, seed)?;
            let (x, y) = first_rows(data, 128);
            for set in net.ph_sets() {
                let r = probe::check_ph_bound(&net, &x, &y, &set)?;
                rows.push(CheckRow::new(name, seed, r.label, r.lhs, r.g, r.holds));
            }
        }
        "grad_bound_expectation" => {
            let (x, y) = first_rows(data, 128);
            let mut make = |d: usize| bias_free_he(cfg, data, seed.wrapping_mul(1000).wrapping_add(d as u64));
            let e = probe::ph_bound_expectation(&mut make, cfg.probe.draws, &x, &y, "classifier")?;
            rows.push(CheckRow::new(name, seed, "classifier", e.mean_g, e.mean_bound - 2.0 * e.stderr_gap, e.holds));
        }
        "ph_scaling" => {
            let net = bias_free_he(cfg, data, seed)?;
            let (x, _) = first_rows(data, 16);
            for set in net.ph_sets() {
                for alpha in [0.5, 2.0, 7.0] {
                    let err = probe::ph_scaling_error(&net, &x, &set, alpha)?;
                    rows.push(CheckRow::new(name, seed, format!("{}@{alpha}", set.label), err, 1e-10, err <= 1e-10));
                }
            }
        }
        "fixup_identity" => {
            let (net, _) = build_network(cfg, Method::Init(InitKind::Fixup), cfg.arch.num_blocks, data, seed)?;
            let (x, _) = first_rows(data, 64.max(probe::MIN_PROFILE_BATCH));
            if x.rows() >= probe::MIN_PROFILE_BATCH {
                let p = probe::variance_profile(&net, &x)?;
                let v0 = p.variances[0];
                let worst = p.variances.iter().map(|v| (v - v0).abs()).fold(0.0, f64::max);
                rows.push(CheckRow::new(name, seed, "variance_constant", worst, 0.0, worst == 0.0 && p.overflow_at.is_none()));
            }
        }
        "fixup_constraint" => {
            let l = cfg.arch.num_blocks;
            let a = probe::fixup_branch_model(l, cfg.arch.branch_layers.max(2))?;
            let c = probe::scalar_branch(&a, 1.0, 1.0, 0.0)?.constraint * (l as f64).sqrt();
            rows.push(CheckRow::new(name, seed, format!("L={l}"), c, 1.0, (0.99..=1.01).contains(&c)));
        }
        "scalar_branch_remainder" => {
            let mut rng = Rng::new(seed).fork(11);
            for i in 0..50 {
                let m = 2 + rng.below(3);
                let a: Vec<f64> = (0..m).map(|_| 0.5 + rng.uniform()).collect();
                let x = 0.5 + rng.uniform();
                let g = (0.5 + rng.uniform()) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                let slope = probe::remainder_slope(&a, x, g, &[1e-2, 1e-3, 1e-4])?.unwrap_or(f64::NAN);
                rows.push(CheckRow::new(name, seed, format!("instance{i}"), slope, 2.0, (slope - 2.0).abs() <= 0.1));
            }
        }
        "update_scale" => {
            let res = update_scale_after_warmup(cfg, data, seed)?;
            let ratios: Vec<f64> = res.iter().filter_map(|r| r.1).collect();
            for (depth, r) in &res {
                rows.push(CheckRow::new(name, seed, format!("L={depth}"), r.unwrap_or(f64::NAN), f64::NAN, r.is_some()));
            }
            let spread = if ratios.len() == res.len() && !ratios.is_empty() {
                ratios.iter().cloned().fold(f64::MIN, f64::max) / ratios.iter().cloned().fold(f64::MAX, f64::min)
            } else {
                f64::INFINITY
            };
            rows.push(CheckRow::new(name, seed, "max/min", spread, 3.0, spread <= 3.0));
        }
        "lsuv" => {
            let (spec, scheme) = cfg.resolve(Method::Init(InitKind::Lsuv), 16, input_shape(data)?, data.classes)?;
            let mut net = Network::build(&spec)?;
            let (x, _) = first_rows(data, 256);
            let rep = apply_lsuv(&mut net, &x, 0.05, scheme.lsuv_max_iter.max(10), &mut init_rng(seed))?;
            for (l, v) in rep.block_variances.iter().enumerate() {
                rows.push(CheckRow::new(name, seed, format!("block{}", l + 1), *v, 1.0, (0.9..=1.1).contains(v)));
            }
        }
        "mixup" => rows.extend(mixup_rows(cfg, data, seed)?),
        other => return Err(FixupError::config(format!("unknown check {other:?}"))),
    }
    Ok(rows)
}

/// Soft-label linearity and the `λ = 1` reduction to a plain step.
fn mixup_rows(cfg: &RunConfig, data: &Dataset, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let (net, _) = build_network(cfg, cfg.method, cfg.arch.num_blocks.min(8), data, seed)?;
    let (x, y) = first_rows(data, 32);
    let hard = one_hot(&y, data.classes)?;
    let mut rng = Rng::new(seed).fork(5);
    let lambda = rng.beta(0.7, 0.7)?;
    let partner = rng.permutation(x.rows());
    let m = mix_with(&x, &hard, lambda, &partner)?;
    let z = net.logits(&m.inputs)?;
    let soft = soft_cross_entropy(&z, &m.targets)?;
    let ya = cross_entropy(&z, &hard)?;
    let yb = cross_entropy(&z, &hard.select_rows(&partner))?;
    let worst = (0..x.rows())
        .map(|i| {
            let comb = lambda * ya.losses[i] + (1.0 - lambda) * yb.losses[i];
            (soft.losses[i] - comb).abs() / comb.abs().max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max);
    rows.push(CheckRow::new("mixup", seed, "soft_label_linearity", worst, 1e-10, worst <= 1e-10));

    let tc = train_cfg(cfg, seed);
    let mut plain = net.clone();
    let mut mixed = net.clone();
    let mut s1 = SgdState::new(&plain);
    let mut s2 = SgdState::new(&mixed);
    train_step(&mut plain, &mut s1, &x, &hard, &tc, tc.lr)?;
    let m1 = mix_with(&x, &hard, 1.0, &partner)?;
    train_step(&mut mixed, &mut s2, &m1.inputs, &m1.targets, &tc, tc.lr)?;
    let same = plain.flat_params().iter().zip(mixed.flat_params()).all(|(a, b)| a.to_bits() == b.to_bits());
    rows.push(CheckRow::new("mixup", seed, "lambda1_bitwise", if same { 0.0 } else { 1.0 }, 0.0, same));
    Ok(rows)
}

/// `verify`: every check for every seed. Returns the CSV and whether all
/// rows passed.
pub fn run_verify(cfg: &RunConfig) -> Result<(String, bool)> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let data = cfg.load_data(seed)?;
        for name in VERIFY_CHECKS {
            rows.extend(verify_check(name, cfg, &data, seed)?);
        }
    }
    let ok = rows.iter().all(|r| r.pass);
    Ok((document(cfg, CHECK_HEADER, rows.iter().map(CheckRow::to_csv)), ok))
}

// ---------------------------------------------------------------------------
// Entry point

fn exit_code(e: &FixupError) -> i32 {
    match e {
        FixupError::Config(_) | FixupError::ConfigLine { .. } => EXIT_CONFIG,
        FixupError::Io(_) | FixupError::Format(_) => EXIT_IO,
        _ => EXIT_CHECK_FAILED,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut cfg = parse_config(&text)?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn emit(cfg: &RunConfig, text: &str) -> Result<()> {
    match &cfg.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Runs the CLI on `args` (including the program name) and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Verify { list: true, .. } => {
            for c in VERIFY_CHECKS {
                println!("{c}");
            }
            return EXIT_OK;
        }
        Command::Verify { common, .. } => load_config(&common).and_then(|cfg| {
            let (text, ok) = run_verify(&cfg)?;
            emit(&cfg, &text)?;
            if !ok {
                for l in text.lines().filter(|l| l.ends_with(",false")) {
                    eprintln!("FAILED {l}");
                }
            }
            Ok(ok)
        }),
        Command::SweepDepth { common } => load_config(&common).and_then(|cfg| emit(&cfg, &run_sweep(&cfg)?).map(|_| true)),
        Command::Train { common } => load_config(&common).and_then(|cfg| emit(&cfg, &run_train(&cfg)?).map(|_| true)),
        Command::Probe { common } => load_config(&common).and_then(|cfg| emit(&cfg, &run_probe(&cfg)?).map(|_| true)),
    };
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        parse_config(
            "arch.blocks = 3\narch.width = 8\ndata.dim = 6\ndata.classes = 3\ndata.n_per_class = 40\n\
             train.batch_size = 16\ntrain.log_every = 2\nprobe.depths = 2,4\nprobe.draws = 8\nprobe.batch = 64\n",
        )
        .unwrap()
    }

    #[test]
    fn metrics_csv_round_trips() {
        let cfg = small();
        let text = run_train(&cfg).unwrap();
        let recs = parse_metrics_csv(&text).unwrap();
        assert!(!recs.is_empty());
        let again: Vec<String> = recs.iter().map(metrics_row).collect();
        let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
        assert_eq!(again, body);
    }

    #[test]
    fn zero_epochs_is_header_only() {
        let mut cfg = small();
        cfg.train.epochs = 0;
        let text = run_train(&cfg).unwrap();
        assert_eq!(text.lines().last().unwrap(), METRICS_HEADER);
    }

    #[test]
    fn echo_reproduces_output() {
        let cfg = small();
        let a = run_train(&cfg).unwrap();
        let b = run_train(&crate::config::config_from_echo(&a).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_has_one_row_per_run() {
        let mut cfg = small();
        cfg.sweep_depths = vec![2, 4];
        cfg.seeds = vec![1, 2];
        let text = run_sweep(&cfg).unwrap();
        let recs = parse_metrics_csv(&text).unwrap();
        assert_eq!(recs.len(), 2 * 4 * 2);
        assert_eq!(recs[0].run_id, "fixup-L2-s1");
        assert_eq!(recs[2].init, "batchnorm");
    }

    #[test]
    fn probe_fixup_profile_is_constant() {
        let text = run_probe(&small()).unwrap();
        let v: Vec<&str> = text.lines().filter(|l| l.starts_with("variance,")).collect();
        assert_eq!(v.len(), 4);
        let vals: Vec<&str> = v.iter().map(|l| l.split(',').nth(3).unwrap()).collect();
        assert!(vals.iter().all(|x| *x == vals[0]));
    }

    #[test]
    fn verify_default_passes() {
        let (text, ok) = run_verify(&RunConfig::default()).unwrap();
        let failed: Vec<&str> = text.lines().filter(|l| l.ends_with(",false")).collect();
        assert!(ok, "{failed:?}");
    }

    #[test]
    fn verify_rejects_large_branch_scale() {
        let cfg = parse_config("ablation.scale_mult = 10\n").unwrap();
        let (text, ok) = run_verify(&cfg).unwrap();
        assert!(!ok);
        assert!(text.lines().any(|l| l.starts_with("update_scale,") && l.ends_with(",false")));
    }

    #[test]
    fn list_and_exit_codes() {
        assert_eq!(run(["fixup", "verify", "--list"]), EXIT_OK);
        assert_eq!(run(["fixup", "verify", "--config", "/nonexistent/cfg"]), EXIT_IO);
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.cfg");
        fs::write(&bad, "train.lrr = 1\n").unwrap();
        assert_eq!(run(["fixup", "train", "--config", bad.to_str().unwrap()]), EXIT_CONFIG);
        assert_eq!(run(["fixup", "bogus"]), EXIT_CONFIG);
    }
}
