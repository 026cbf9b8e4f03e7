//! Run configuration: a line-oriented `section.key = value` format.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated.
//! Every key has a default, so an empty file is a valid configuration.
//! [`RunConfig::echo`] renders the fully resolved configuration in the same
//! grammar, one `# `-prefixed line per key, for CSV headers.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{self, Dataset};
use crate::error::{FixupError, Result};
use crate::init::{BaseInit, InitKind, InitScheme};
use crate::net::{BlockKind, InputShape, NetworkSpec, ShortcutKind};
use crate::train::{LrSchedule, TrainConfig};

/// What a run compares: an initialization scheme, plus BatchNorm as a
/// normalization baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Init(InitKind),
    BatchNorm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Init(k) => k.name(),
            Method::BatchNorm => "batchnorm",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        if s == "batchnorm" {
            Some(Method::BatchNorm)
        } else {
            InitKind::parse(s).map(Method::Init)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    /// Class `k` centred at `separation·e_(k mod dim)`.
    Synthetic,
    /// Class `k` centred at `±separation·e_(k mod dim)`; not linearly
    /// separable.
    Antipodal,
    Idx,
    Cifar10,
}

impl DataSource {
    fn name(self) -> &'static str {
        match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Antipodal => "antipodal",
            DataSource::Idx => "idx",
            DataSource::Cifar10 => "cifar10",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub separation: f64,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub cifar_train: Vec<String>,
    pub cifar_test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub batch: usize,
    pub eta: f64,
    pub depths: Vec<usize>,
    pub draws: usize,
    /// SGD steps at the training learning rate before the update-scale
    /// measurement in `verify`.
    pub warmup_steps: usize,
    /// Also emit a training-accuracy curve from `probe`.
    pub curve: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub no_bias: bool,
    pub no_residual: bool,
    pub scale_mult: f64,
    /// `false` uses the rescaled base init for the last branch layer too.
    pub zero_last: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Architecture template; `input` and `num_blocks` are filled per run.
    pub arch: NetworkSpec,
    pub method: Method,
    pub scheme: InitScheme,
    pub ablation: Ablation,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub sweep_depths: Vec<usize>,
    pub sweep_methods: Vec<Method>,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: NetworkSpec::default(),
            method: Method::Init(InitKind::Fixup),
            scheme: InitScheme::default(),
            ablation: Ablation { no_bias: false, no_residual: false, scale_mult: 1.0, zero_last: true },
            train: TrainConfig { batch_size: 64, ..TrainConfig::default() },
            data: DataConfig {
                source: DataSource::Synthetic,
                classes: 10,
                dim: 64,
                n_per_class: 800,
                separation: 3.0,
                train_images: String::new(),
                train_labels: String::new(),
                test_images: String::new(),
                test_labels: String::new(),
                cifar_train: Vec::new(),
                cifar_test: Vec::new(),
            },
            seeds: vec![0],
            out: None,
            sweep_depths: vec![8, 64, 256, 1024],
            sweep_methods: vec![
                Method::Init(InitKind::Fixup),
                Method::BatchNorm,
                Method::Init(InitKind::He),
                Method::Init(InitKind::SqrtHalf),
            ],
            probe: ProbeConfig {
                batch: 256,
                eta: 1e-4,
                depths: vec![4, 16, 64],
                draws: 64,
                warmup_steps: 20,
                curve: false,
            },
        }
    }
}

type Setter = fn(&mut RunConfig, &str) -> std::result::Result<(), String>;
type Getter = fn(&RunConfig) -> String;

fn put<T>(slot: &mut T, value: std::result::Result<T, String>) -> std::result::Result<(), String> {
    *slot = value?;
    Ok(())
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse {v:?}: {e}"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| f(s.trim())).collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn method(v: &str) -> std::result::Result<Method, String> {
    Method::parse(v).ok_or_else(|| format!("unknown init scheme {v:?}"))
}

/// Every accepted key, its setter and its getter, in echo order.
const KEYS: &[(&str, Setter, Getter)] = &[
    ("arch.blocks", |c, v| put(&mut c.arch.num_blocks, num(v)), |c| c.arch.num_blocks.to_string()),
    ("arch.branch_layers", |c, v| put(&mut c.arch.branch_layers, num(v)), |c| c.arch.branch_layers.to_string()),
    ("arch.width", |c, v| put(&mut c.arch.width, num(v)), |c| c.arch.width.to_string()),
    (
        "arch.block_kind",
        |c, v| {
            c.arch.block_kind = match v {
                "mlp" => BlockKind::Mlp,
                "conv_basic" => BlockKind::ConvBasic,
                _ => return Err(format!("unknown block kind {v:?}")),
            };
            Ok(())
        },
        |c| match c.arch.block_kind {
            BlockKind::Mlp => "mlp".into(),
            BlockKind::ConvBasic => "conv_basic".into(),
        },
    ),
    ("arch.use_batchnorm", |c, v| put(&mut c.arch.use_batchnorm, boolean(v)), |c| c.arch.use_batchnorm.to_string()),
    ("arch.use_scalar_bias", |c, v| put(&mut c.arch.use_scalar_bias, boolean(v)), |c| c.arch.use_scalar_bias.to_string()),
    ("arch.use_multiplier", |c, v| put(&mut c.arch.use_multiplier, boolean(v)), |c| c.arch.use_multiplier.to_string()),
    (
        "arch.stages",
        |c, v| {
            c.arch.stage_shortcuts = list(v, |s| match s {
                "identity" => Ok(ShortcutKind::Identity),
                "projection" => Ok(ShortcutKind::Projection),
                _ => Err(format!("unknown shortcut kind {s:?}")),
            })?;
            Ok(())
        },
        |c| {
            c.arch
                .stage_shortcuts
                .iter()
                .map(|s| match s {
                    ShortcutKind::Identity => "identity",
                    ShortcutKind::Projection => "projection",
                })
                .collect::<Vec<_>>()
                .join(",")
        },
    ),
    ("ablation.no_bias", |c, v| put(&mut c.ablation.no_bias, boolean(v)), |c| c.ablation.no_bias.to_string()),
    ("ablation.no_residual", |c, v| put(&mut c.ablation.no_residual, boolean(v)), |c| c.ablation.no_residual.to_string()),
    ("ablation.scale_mult", |c, v| put(&mut c.ablation.scale_mult, num(v)), |c| c.ablation.scale_mult.to_string()),
    (
        "ablation.last_layer",
        |c, v| {
            c.ablation.zero_last = match v {
                "zero" => true,
                "scaled" => false,
                _ => return Err(format!("expected zero or scaled, got {v:?}")),
            };
            Ok(())
        },
        |c| if c.ablation.zero_last { "zero".into() } else { "scaled".into() },
    ),
    ("init.scheme", |c, v| put(&mut c.method, method(v)), |c| c.method.name().into()),
    (
        "init.base",
        |c, v| {
            c.scheme.base = match v {
                "he" => BaseInit::He,
                "xavier" => BaseInit::Xavier,
                _ => return Err(format!("expected he or xavier, got {v:?}")),
            };
            Ok(())
        },
        |c| match c.scheme.base {
            BaseInit::He => "he".into(),
            BaseInit::Xavier => "xavier".into(),
        },
    ),
    ("init.lsuv_tol", |c, v| put(&mut c.scheme.lsuv_tol, num(v)), |c| c.scheme.lsuv_tol.to_string()),
    ("init.lsuv_max_iter", |c, v| put(&mut c.scheme.lsuv_max_iter, num(v)), |c| c.scheme.lsuv_max_iter.to_string()),
    ("train.lr", |c, v| put(&mut c.train.lr, num(v)), |c| c.train.lr.to_string()),
    ("train.momentum", |c, v| put(&mut c.train.momentum, num(v)), |c| c.train.momentum.to_string()),
    ("train.weight_decay", |c, v| put(&mut c.train.weight_decay, num(v)), |c| c.train.weight_decay.to_string()),
    ("train.epochs", |c, v| put(&mut c.train.epochs, num(v)), |c| c.train.epochs.to_string()),
    ("train.batch_size", |c, v| put(&mut c.train.batch_size, num(v)), |c| c.train.batch_size.to_string()),
    (
        "train.scalar_lr_multiplier",
        |c, v| put(&mut c.train.scalar_lr_multiplier, num(v)),
        |c| c.train.scalar_lr_multiplier.to_string(),
    ),
    ("train.mixup_alpha", |c, v| put(&mut c.train.mixup_alpha, num(v)), |c| c.train.mixup_alpha.to_string()),
    (
        "train.lr_schedule",
        |c, v| {
            let (milestones, gamma) = match &c.train.lr_schedule {
                LrSchedule::Step { milestones, gamma } => (milestones.clone(), *gamma),
                LrSchedule::Constant => (Vec::new(), 0.1),
            };
            c.train.lr_schedule = match v {
                "constant" => LrSchedule::Constant,
                "step" => LrSchedule::Step { milestones, gamma },
                _ => return Err(format!("expected constant or step, got {v:?}")),
            };
            Ok(())
        },
        |c| match &c.train.lr_schedule {
            LrSchedule::Step { milestones, .. } if !milestones.is_empty() => "step".into(),
            _ => "constant".into(),
        },
    ),
    (
        "train.lr_milestones",
        |c, v| {
            let m = list(v, num)?;
            match &mut c.train.lr_schedule {
                LrSchedule::Step { milestones, .. } => *milestones = m,
                LrSchedule::Constant if m.is_empty() => {}
                s => *s = LrSchedule::Step { milestones: m, gamma: 0.1 },
            }
            Ok(())
        },
        |c| match &c.train.lr_schedule {
            LrSchedule::Step { milestones, .. } => join(milestones),
            LrSchedule::Constant => String::new(),
        },
    ),
    (
        "train.lr_gamma",
        |c, v| {
            let g = num(v)?;
            match &mut c.train.lr_schedule {
                LrSchedule::Step { gamma, .. } => *gamma = g,
                s => *s = LrSchedule::Step { milestones: Vec::new(), gamma: g },
            }
            Ok(())
        },
        |c| match &c.train.lr_schedule {
            LrSchedule::Step { gamma, .. } => gamma.to_string(),
            LrSchedule::Constant => "0.1".into(),
        },
    ),
    ("train.log_every", |c, v| put(&mut c.train.log_every, num(v)), |c| c.train.log_every.to_string()),
    ("train.decay_scalars", |c, v| put(&mut c.train.decay_scalars, boolean(v)), |c| c.train.decay_scalars.to_string()),
    (
        "data.source",
        |c, v| {
            c.data.source = match v {
                "synthetic" => DataSource::Synthetic,
                "antipodal" => DataSource::Antipodal,
                "idx" => DataSource::Idx,
                "cifar10" => DataSource::Cifar10,
                _ => return Err(format!("unknown data source {v:?}")),
            };
            Ok(())
        },
        |c| c.data.source.name().into(),
    ),
    ("data.classes", |c, v| put(&mut c.data.classes, num(v)), |c| c.data.classes.to_string()),
    ("data.dim", |c, v| put(&mut c.data.dim, num(v)), |c| c.data.dim.to_string()),
    ("data.n_per_class", |c, v| put(&mut c.data.n_per_class, num(v)), |c| c.data.n_per_class.to_string()),
    ("data.separation", |c, v| put(&mut c.data.separation, num(v)), |c| c.data.separation.to_string()),
    ("data.train_images", |c, v| put(&mut c.data.train_images, Ok(v.into())), |c| c.data.train_images.clone()),
    ("data.train_labels", |c, v| put(&mut c.data.train_labels, Ok(v.into())), |c| c.data.train_labels.clone()),
    ("data.test_images", |c, v| put(&mut c.data.test_images, Ok(v.into())), |c| c.data.test_images.clone()),
    ("data.test_labels", |c, v| put(&mut c.data.test_labels, Ok(v.into())), |c| c.data.test_labels.clone()),
    ("data.cifar_train", |c, v| put(&mut c.data.cifar_train, list(v, |s| Ok(s.to_string()))), |c| c.data.cifar_train.join(",")),
    ("data.cifar_test", |c, v| put(&mut c.data.cifar_test, list(v, |s| Ok(s.to_string()))), |c| c.data.cifar_test.join(",")),
    ("run.seeds", |c, v| put(&mut c.seeds, list(v, num)), |c| join(&c.seeds)),
    (
        "run.out",
        |c, v| put(&mut c.out, Ok(if v.is_empty() { None } else { Some(PathBuf::from(v)) })),
        |c| c.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
    ),
    ("sweep.depths", |c, v| put(&mut c.sweep_depths, list(v, num)), |c| join(&c.sweep_depths)),
    (
        "sweep.inits",
        |c, v| put(&mut c.sweep_methods, list(v, method)),
        |c| c.sweep_methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
    ),
    ("probe.batch", |c, v| put(&mut c.probe.batch, num(v)), |c| c.probe.batch.to_string()),
    ("probe.eta", |c, v| put(&mut c.probe.eta, num(v)), |c| c.probe.eta.to_string()),
    ("probe.depths", |c, v| put(&mut c.probe.depths, list(v, num)), |c| join(&c.probe.depths)),
    ("probe.draws", |c, v| put(&mut c.probe.draws, num(v)), |c| c.probe.draws.to_string()),
    ("probe.warmup_steps", |c, v| put(&mut c.probe.warmup_steps, num(v)), |c| c.probe.warmup_steps.to_string()),
    ("probe.curve", |c, v| put(&mut c.probe.curve, boolean(v)), |c| c.probe.curve.to_string()),
];

/// Names of all accepted keys, in echo order.
pub fn known_keys() -> impl Iterator<Item = &'static str> {
    KEYS.iter().map(|(k, _, _)| *k)
}

fn line_err(line: usize, msg: impl Into<String>) -> FixupError {
    FixupError::ConfigLine { line, msg: msg.into() }
}

/// Parses configuration text. Errors carry the 1-based line number.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut scalar_lr_set = false;
    let mut seen: Vec<(&str, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| line_err(n, format!("expected `section.key = value`, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let (name, set, _) =
            KEYS.iter().find(|(k, _, _)| *k == key).ok_or_else(|| line_err(n, format!("unknown key {key:?}")))?;
        set(&mut cfg, value).map_err(|e| line_err(n, format!("{key}: {e}")))?;
        seen.push((name, n));
        if *name == "train.scalar_lr_multiplier" {
            scalar_lr_set = true;
        }
    }
    if cfg.train.mixup_alpha > 0.0 && !scalar_lr_set {
        cfg.train.scalar_lr_multiplier = 0.1;
    }
    let line_of = |keys: &[&str]| seen.iter().filter(|(k, _)| keys.contains(k)).map(|(_, n)| *n).max().unwrap_or(0);
    cfg.validate().map_err(|e| {
        let n = match &e {
            FixupError::Config(m) if m.contains("BatchNorm") => line_of(&["init.scheme", "arch.use_batchnorm"]),
            FixupError::Config(m) if m.contains("use_multiplier") => line_of(&["arch.use_batchnorm", "arch.use_multiplier"]),
            _ => 0,
        };
        match e {
            FixupError::Config(msg) if n > 0 => line_err(n, msg),
            other => other,
        }
    })?;
    Ok(cfg)
}

/// Extracts the echoed configuration from the `# `-prefixed header of an
/// emitted CSV file.
pub fn config_from_echo(csv: &str) -> Result<RunConfig> {
    let body: Vec<&str> = csv.lines().filter_map(|l| l.strip_prefix("# ")).collect();
    parse_config(&body.join("\n"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == Method::Init(InitKind::Fixup) && self.arch.use_batchnorm {
            return Err(FixupError::config("init.scheme = fixup cannot be combined with BatchNorm"));
        }
        if self.arch.use_batchnorm && self.arch.use_multiplier && self.method != Method::BatchNorm {
            return Err(FixupError::config("arch.use_batchnorm and arch.use_multiplier are mutually exclusive"));
        }
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(FixupError::config("run.seeds must list at least one seed"));
        }
        if !(self.ablation.scale_mult > 0.0) {
            return Err(FixupError::config("ablation.scale_mult must be > 0"));
        }
        if self.data.classes < 2 || self.data.dim < 1 || self.data.n_per_class < 1 {
            return Err(FixupError::config("data.classes >= 2, data.dim >= 1 and data.n_per_class >= 1 are required"));
        }
        if self.probe.batch < 1 || self.probe.draws < 2 {
            return Err(FixupError::config("probe.batch must be >= 1 and probe.draws >= 2"));
        }
        let mut template = self.arch.clone();
        template.input = match self.arch.block_kind {
            BlockKind::Mlp => InputShape::Flat(1),
            BlockKind::ConvBasic => InputShape::Image { channels: 1, height: 8, width: 8 },
        };
        if self.arch.use_batchnorm {
            template.use_multiplier = false;
        }
        template.validate()
    }

    /// `# key = value` for every key, in a stable order.
    pub fn echo(&self) -> String {
        KEYS.iter().map(|(k, _, get)| format!("# {k} = {}\n", get(self))).collect()
    }

    /// Network spec and init scheme for `method` at depth `blocks` with the
    /// given input shape.
    ///
    /// Baselines other than Fixup drop the scalar biases and multipliers;
    /// BatchNorm turns normalization on; `sqrt_half` sets the block output
    /// scale.
    pub fn resolve(&self, method: Method, blocks: usize, input: InputShape, classes: usize) -> Result<(NetworkSpec, InitScheme)> {
        let mut spec = self.arch.clone();
        spec.input = input;
        spec.num_blocks = blocks;
        spec.classes = classes;
        spec.residual = !self.ablation.no_residual;
        if self.ablation.no_bias {
            spec.use_scalar_bias = false;
        }
        let mut scheme = self.scheme.clone();
        scheme.fixup_scale_mult = self.ablation.scale_mult;
        scheme.fixup_zero_last = self.ablation.zero_last;
        match method {
            Method::Init(InitKind::Fixup) => {
                if spec.use_batchnorm {
                    return Err(FixupError::config("Fixup cannot be combined with BatchNorm"));
                }
                scheme.kind = InitKind::Fixup;
            }
            Method::BatchNorm => {
                spec.use_batchnorm = true;
                spec.use_multiplier = false;
                spec.use_scalar_bias = false;
                scheme.kind = match scheme.base {
                    BaseInit::He => InitKind::He,
                    BaseInit::Xavier => InitKind::Xavier,
                };
            }
            Method::Init(kind) => {
                spec.use_multiplier = false;
                spec.use_scalar_bias = false;
                if kind == InitKind::SqrtHalf {
                    spec.branch_output_scale = 0.5f64.sqrt();
                }
                scheme.kind = kind;
            }
        }
        spec.validate()?;
        Ok((spec, scheme))
    }

    /// Builds the configured dataset; synthetic sources use `seed`.
    pub fn load_data(&self, seed: u64) -> Result<Dataset> {
        let d = &self.data;
        let ds = match d.source {
            DataSource::Synthetic => data::synth_gaussian(d.classes, d.dim, d.n_per_class, d.separation, seed)?,
            DataSource::Antipodal => data::synth_antipodal(d.classes, d.dim, d.n_per_class, d.separation, seed)?,
            DataSource::Idx => {
                let need = [&d.train_images, &d.train_labels, &d.test_images, &d.test_labels];
                if need.iter().any(|p| p.is_empty()) {
                    return Err(FixupError::config("data.source = idx needs train/test image and label paths"));
                }
                let tr = data::load_idx(d.train_images.as_ref(), d.train_labels.as_ref())?;
                let te = data::load_idx(d.test_images.as_ref(), d.test_labels.as_ref())?;
                Dataset::new(tr, te, d.classes)?.standardized()
            }
            DataSource::Cifar10 => {
                if d.cifar_train.is_empty() || d.cifar_test.is_empty() {
                    return Err(FixupError::config("data.source = cifar10 needs data.cifar_train and data.cifar_test"));
                }
                let paths = |v: &[String]| v.iter().map(PathBuf::from).collect::<Vec<_>>();
                let tr = paths(&d.cifar_train);
                let te = paths(&d.cifar_test);
                let tr = data::load_cifar10_bin(&tr.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
                let te = data::load_cifar10_bin(&te.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
                Dataset::new(tr, te, d.classes)?.standardized()
            }
        };
        match self.arch.block_kind {
            BlockKind::Mlp => ds.flattened(),
            BlockKind::ConvBasic => Ok(ds),
        }
    }
}

/// Input shape of a dataset as seen by the network.
pub fn input_shape(ds: &Dataset) -> Result<InputShape> {
    match *ds.example_shape() {
        [d] => Ok(InputShape::Flat(d)),
        [c, h, w] => Ok(InputShape::Image { channels: c, height: h, width: w }),
        ref s => Err(FixupError::UnsupportedShape(format!("example shape {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        let c = parse_config("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.lr, 0.1);
        assert_eq!(c.train.weight_decay, 5e-4);
        assert_eq!(c.train.momentum, 0.9);
    }

    #[test]
    fn sets_values_and_ignores_comments() {
        let c = parse_config("# header\ntrain.lr = 0.05  # trailing\n\nsweep.depths = 4, 16\nrun.seeds = 1,2,3\n").unwrap();
        assert_eq!(c.train.lr, 0.05);
        assert_eq!(c.sweep_depths, vec![4, 16]);
        assert_eq!(c.seeds, vec![1, 2, 3]);
    }

    #[test]
    fn unknown_key_reports_line() {
        let e = parse_config("train.lr = 0.1\ntrain.lrr = 0.2\n").unwrap_err();
        assert!(matches!(e, FixupError::ConfigLine { line: 2, .. }), "{e}");
        let e = parse_config("\n\ntrain.epochs = many\n").unwrap_err();
        assert!(matches!(e, FixupError::ConfigLine { line: 3, .. }), "{e}");
        let e = parse_config("train.lr\n").unwrap_err();
        assert!(matches!(e, FixupError::ConfigLine { line: 1, .. }), "{e}");
    }

    #[test]
    fn fixup_with_batchnorm_is_rejected() {
        let e = parse_config("init.scheme = fixup\narch.use_batchnorm = true\n").unwrap_err();
        assert!(matches!(e, FixupError::ConfigLine { line: 2, .. }), "{e}");
        assert!(parse_config("init.scheme = he\narch.use_batchnorm = true\narch.use_multiplier = false\n").is_ok());
    }

    #[test]
    fn invariant_violations_are_errors() {
        assert!(parse_config("train.momentum = 1.0").is_err());
        assert!(parse_config("train.batch_size = 0").is_err());
        assert!(parse_config("run.seeds = ").is_err());
    }

    #[test]
    fn mixup_lowers_scalar_lr_unless_set() {
        assert_eq!(parse_config("train.mixup_alpha = 0.7").unwrap().train.scalar_lr_multiplier, 0.1);
        let c = parse_config("train.mixup_alpha = 0.7\ntrain.scalar_lr_multiplier = 0.5").unwrap();
        assert_eq!(c.train.scalar_lr_multiplier, 0.5);
    }

    #[test]
    fn echo_round_trips() {
        let text = "train.lr = 0.05\ntrain.lr_schedule = step\ntrain.lr_milestones = 2,5\nablation.scale_mult = 0.1\n\
                    sweep.inits = fixup,batchnorm\nrun.out = /tmp/x.csv\ndata.cifar_train = a,b\ntrain.mixup_alpha = 0.7\n";
        let c = parse_config(text).unwrap();
        let back = config_from_echo(&c.echo()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.echo(), back.echo());
        assert_eq!(c.echo().lines().count(), known_keys().count());
    }

    #[test]
    fn resolve_methods() {
        let c = RunConfig::default();
        let (s, k) = c.resolve(Method::BatchNorm, 4, InputShape::Flat(3), 10).unwrap();
        assert!(s.use_batchnorm && !s.use_multiplier && k.kind == InitKind::He);
        let (s, _) = c.resolve(Method::Init(InitKind::SqrtHalf), 4, InputShape::Flat(3), 10).unwrap();
        assert_eq!(s.branch_output_scale, 0.5f64.sqrt());
        let (s, k) = c.resolve(Method::Init(InitKind::Fixup), 4, InputShape::Flat(3), 10).unwrap();
        assert!(s.use_multiplier && s.use_scalar_bias && k.kind == InitKind::Fixup);
        let c = parse_config("ablation.no_bias = true\nablation.no_residual = true\nablation.last_layer = scaled").unwrap();
        let (s, k) = c.resolve(Method::Init(InitKind::Fixup), 4, InputShape::Flat(3), 10).unwrap();
        assert!(!s.use_scalar_bias && !s.residual && !k.fixup_zero_last);
    }
}
