//! Residual networks built from a declarative [`NetworkSpec`].
//!
//! A network is a stem, a sequence of residual blocks, and a head ending in
//! the classifier. Every trainable tensor lives in one registry and carries
//! tags describing where it sits, so initializers and optimizers can treat
//! branch weights, shortcut weights, scalar biases and multipliers
//! differently.

mod batchnorm;
mod layers;
mod loss;
mod pass;
mod phset;

pub use batchnorm::{batchnorm, batchnorm_backward, BatchNormOutput, BN_EPS, BN_MOMENTUM};
pub use loss::{cross_entropy, one_hot, soft_cross_entropy, CrossEntropy};
pub use pass::{Gradients, Mode, Trace};
pub use phset::PhSet;

use std::fmt;

use crate::error::{FixupError, Result};
use crate::tensor::Tensor;

use layers::Layer;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Mlp,
    ConvBasic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShortcutKind {
    Identity,
    Projection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputShape {
    Flat(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn numel(&self) -> usize {
        match *self {
            InputShape::Flat(d) => d,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        match *self {
            InputShape::Flat(d) => vec![n, d],
            InputShape::Image { channels, height, width } => vec![n, channels, height, width],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input: InputShape,
    /// Number of residual blocks `L`.
    pub num_blocks: usize,
    /// Weight layers per residual branch `m`.
    pub branch_layers: usize,
    pub width: usize,
    pub block_kind: BlockKind,
    pub classes: usize,
    pub use_batchnorm: bool,
    pub use_scalar_bias: bool,
    pub use_multiplier: bool,
    /// One entry per stage; blocks are split evenly across stages and a
    /// projection stage starts with a projected (for conv: strided) block.
    pub stage_shortcuts: Vec<ShortcutKind>,
    /// Fixed factor applied to `x + F(x)`; `sqrt(1/2)` gives the rescaling
    /// baseline.
    pub branch_output_scale: f64,
    /// `false` turns every block into `F(x)` with no skip connection.
    pub residual: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            input: InputShape::Flat(64),
            num_blocks: 8,
            branch_layers: 2,
            width: 64,
            block_kind: BlockKind::Mlp,
            classes: 10,
            use_batchnorm: false,
            use_scalar_bias: true,
            use_multiplier: true,
            stage_shortcuts: vec![ShortcutKind::Identity],
            branch_output_scale: 1.0,
            residual: true,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 1 {
            return Err(FixupError::config("num_blocks must be >= 1"));
        }
        if self.branch_layers < 1 {
            return Err(FixupError::config("branch_layers must be >= 1"));
        }
        if self.classes < 2 {
            return Err(FixupError::config("classes must be >= 2"));
        }
        if self.width < 1 || self.input.numel() < 1 {
            return Err(FixupError::config("width and input size must be positive"));
        }
        if self.use_batchnorm && self.use_multiplier {
            return Err(FixupError::config(
                "use_batchnorm and use_multiplier are mutually exclusive",
            ));
        }
        if !(self.branch_output_scale > 0.0) {
            return Err(FixupError::config("branch_output_scale must be positive"));
        }
        if self.stage_shortcuts.is_empty() || self.stage_shortcuts.len() > self.num_blocks {
            return Err(FixupError::config("need between 1 and num_blocks stages"));
        }
        match (self.block_kind, self.input) {
            (BlockKind::Mlp, InputShape::Image { .. }) => {
                Err(FixupError::config("mlp blocks need a flat input; flatten the data first"))
            }
            (BlockKind::ConvBasic, InputShape::Flat(_)) => {
                Err(FixupError::config("conv-basic blocks need an image input"))
            }
            _ => Ok(()),
        }
    }

    fn stage_of_blocks(&self) -> Vec<usize> {
        let s = self.stage_shortcuts.len();
        let (base, extra) = (self.num_blocks / s, self.num_blocks % s);
        (0..s).flat_map(|i| std::iter::repeat_n(i, base + usize::from(i < extra))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    ScalarBias,
    Multiplier,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    /// Scalar biases and multipliers, which get their own learning rate.
    pub fn is_scalar(self) -> bool {
        matches!(self, ParamKind::ScalarBias | ParamKind::Multiplier)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Site {
    Stem,
    /// `layer` is 1-based within the branch.
    Branch { block: usize, layer: usize },
    /// Multiplier on the branch output.
    BranchOutput { block: usize },
    Shortcut { block: usize },
    Head,
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTags {
    pub kind: ParamKind,
    pub site: Site,
    pub in_residual_branch: bool,
    pub branch_index: Option<usize>,
    pub layer_index: Option<usize>,
    pub is_last_in_branch: bool,
    pub is_classifier: bool,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub tags: ParamTags,
}

impl Param {
    /// `(fan_in, fan_out)` for weight tensors.
    pub fn fans(&self) -> (usize, usize) {
        match self.value.shape() {
            &[out, inp] => (inp, out),
            &[f, c, kh, kw] => (c * kh * kw, f * kh * kw),
            s => (s.iter().product(), s.iter().product()),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub(crate) branch: Vec<Layer>,
    pub(crate) shortcut: Vec<Layer>,
    pub(crate) projected: bool,
}

#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Param>,
    pub(crate) stem: Vec<Layer>,
    pub(crate) blocks: Vec<Block>,
    pub(crate) head: Vec<Layer>,
    running: Vec<RunningStats>,
    initialized: bool,
    version: u64,
}

struct Builder {
    params: Vec<Param>,
    running: Vec<RunningStats>,
    spec: NetworkSpec,
}

impl Builder {
    fn push(&mut self, name: String, value: Tensor, kind: ParamKind, site: Site) -> ParamId {
        let m = self.spec.branch_layers;
        let (in_branch, branch_index, layer_index, last) = match site {
            Site::Branch { block, layer } => (true, Some(block), Some(layer), layer == m),
            Site::BranchOutput { block } => (true, Some(block), None, false),
            _ => (false, None, None, false),
        };
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name,
            value,
            tags: ParamTags {
                kind,
                site,
                in_residual_branch: in_branch,
                branch_index,
                layer_index,
                is_last_in_branch: last && kind == ParamKind::Weight,
                is_classifier: site == Site::Classifier,
            },
        });
        id
    }

    fn bias(&mut self, name: String, site: Site) -> Layer {
        Layer::Bias { b: self.push(name, Tensor::scalar(0.0), ParamKind::ScalarBias, site) }
    }

    fn bn(&mut self, prefix: &str, features: usize, site: Site) -> Layer {
        let gamma = self.push(format!("{prefix}.gamma"), Tensor::full(&[features], 1.0), ParamKind::BnGamma, site);
        let beta = self.push(format!("{prefix}.beta"), Tensor::zeros(&[features]), ParamKind::BnBeta, site);
        let stats = self.running.len();
        self.running.push(RunningStats { mean: vec![0.0; features], var: vec![1.0; features] });
        Layer::BatchNorm { gamma, beta, stats }
    }

    fn weight(&mut self, name: String, shape: &[usize], site: Site) -> ParamId {
        self.push(name, Tensor::zeros(shape), ParamKind::Weight, site)
    }
}

impl Network {
    /// Lays out parameters for `spec`. Weights are zero and the network
    /// refuses to run until an initializer has been applied.
    pub fn build(spec: &NetworkSpec) -> Result<Network> {
        spec.validate()?;
        let mut b = Builder { params: Vec::new(), running: Vec::new(), spec: spec.clone() };
        let conv = spec.block_kind == BlockKind::ConvBasic;
        let w = spec.width;

        let mut stem = Vec::new();
        match spec.input {
            InputShape::Flat(d) => {
                let id = b.weight("stem.w".into(), &[w, d], Site::Stem);
                stem.push(Layer::Linear { w: id });
            }
            InputShape::Image { channels, .. } => {
                let id = b.weight("stem.w".into(), &[w, channels, 3, 3], Site::Stem);
                stem.push(Layer::Conv { w: id, stride: 1, pad: 1 });
            }
        }
        if spec.use_scalar_bias {
            stem.push(b.bias("stem.bias".into(), Site::Stem));
        }

        let stages = spec.stage_of_blocks();
        let mut blocks = Vec::with_capacity(spec.num_blocks);
        let mut channels = w;
        for (l, &stage) in stages.iter().enumerate() {
            let first_of_stage = l == 0 || stages[l - 1] != stage;
            let projected = first_of_stage && spec.stage_shortcuts[stage] == ShortcutKind::Projection;
            let downsample = conv && projected && stage > 0;
            let out_ch = if downsample { channels * 2 } else { channels };
            let p = format!("block{}", l + 1);

            let mut branch = Vec::new();
            let mut in_ch = channels;
            for i in 1..=spec.branch_layers {
                let site = Site::Branch { block: l, layer: i };
                if spec.use_batchnorm {
                    branch.push(b.bn(&format!("{p}.bn{i}"), in_ch, site));
                }
                if spec.use_scalar_bias {
                    branch.push(b.bias(format!("{p}.bias_act{i}"), site));
                }
                branch.push(Layer::Relu);
                if spec.use_scalar_bias {
                    branch.push(b.bias(format!("{p}.bias_w{i}"), site));
                }
                let name = format!("{p}.w{i}");
                if conv {
                    let id = b.weight(name, &[out_ch, in_ch, 3, 3], site);
                    let stride = if downsample && i == 1 { 2 } else { 1 };
                    branch.push(Layer::Conv { w: id, stride, pad: 1 });
                } else {
                    let id = b.weight(name, &[out_ch, in_ch], site);
                    branch.push(Layer::Linear { w: id });
                }
                in_ch = out_ch;
            }
            if spec.use_multiplier {
                let id = b.push(format!("{p}.mult"), Tensor::scalar(1.0), ParamKind::Multiplier, Site::BranchOutput { block: l });
                branch.push(Layer::Mult { s: id });
            }

            let mut shortcut = Vec::new();
            if projected && spec.residual {
                let site = Site::Shortcut { block: l };
                if conv {
                    let id = b.weight(format!("{p}.proj"), &[out_ch, channels, 1, 1], site);
                    shortcut.push(Layer::Conv { w: id, stride: if downsample { 2 } else { 1 }, pad: 0 });
                } else {
                    let id = b.weight(format!("{p}.proj"), &[out_ch, channels], site);
                    shortcut.push(Layer::Linear { w: id });
                }
            }
            blocks.push(Block { branch, shortcut, projected: projected && spec.residual });
            channels = out_ch;
        }

        let mut head = Vec::new();
        if spec.use_batchnorm {
            head.push(b.bn("head.bn", channels, Site::Head));
            head.push(Layer::Relu);
        }
        if conv {
            head.push(Layer::GlobalAvgPool);
        }
        if spec.use_scalar_bias {
            head.push(b.bias("head.bias".into(), Site::Head));
        }
        let id = b.weight("classifier.w".into(), &[spec.classes, channels], Site::Classifier);
        head.push(Layer::Linear { w: id });

        Ok(Network {
            spec: spec.clone(),
            params: b.params,
            stem,
            blocks,
            head,
            running: b.running,
            initialized: false,
            version: 0,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    /// Mutable access invalidates outstanding traces.
    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        self.version += 1;
        &mut self.params[id.0]
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Branch weight layers of block `l`, in order.
    pub fn branch_weights(&self, block: usize) -> Vec<ParamId> {
        let mut ws: Vec<(usize, ParamId)> = self
            .params
            .iter()
            .enumerate()
            .filter_map(|(i, p)| match p.tags.site {
                Site::Branch { block: b, layer } if b == block && p.tags.kind == ParamKind::Weight => {
                    Some((layer, ParamId(i)))
                }
                _ => None,
            })
            .collect();
        ws.sort_by_key(|&(layer, _)| layer);
        ws.into_iter().map(|(_, id)| id).collect()
    }

    /// Every parameter belonging to block `l`'s residual branch, including
    /// its scalar biases, BatchNorm affine terms and multiplier.
    pub fn branch_params(&self, block: usize) -> Vec<ParamId> {
        self.param_ids()
            .filter(|&id| self.param(id).tags.in_residual_branch && self.param(id).tags.branch_index == Some(block))
            .collect()
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub(crate) fn mark_initialized(&mut self) {
        self.initialized = true;
        self.version += 1;
    }

    pub(crate) fn running_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    pub(crate) fn reset_running_stats(&mut self) {
        for r in &mut self.running {
            r.mean.iter_mut().for_each(|v| *v = 0.0);
            r.var.iter_mut().for_each(|v| *v = 1.0);
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// True when some scalar bias is nonzero or BatchNorm is present, i.e.
    /// the network is not positively homogeneous in its weights.
    pub fn has_active_biases(&self) -> bool {
        self.spec.use_batchnorm
            || self
                .params
                .iter()
                .any(|p| p.tags.kind == ParamKind::ScalarBias && p.value.data()[0] != 0.0)
    }

    /// Flat copy of every parameter value, in registry order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(FixupError::Consistency("snapshot does not match registry".into()));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(FixupError::Consistency(format!("snapshot shape mismatch for {}", p.name)));
            }
            p.value = v.clone();
        }
        self.version += 1;
        Ok(())
    }
}
