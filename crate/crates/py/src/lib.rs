//! Python bindings. Tensors cross the boundary as nested lists: a batch is
//! a list of rows, each row the flattened example.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fixup_core::cli;
use fixup_core::config::parse_config;
use fixup_core::init::{apply, InitKind, InitScheme};
use fixup_core::net::{cross_entropy, one_hot, BlockKind, InputShape, Mode};
use fixup_core::probe;
use fixup_core::train::{sgd_step, SgdState, TrainConfig};
use fixup_core::{FixupError, Network as CoreNetwork, NetworkSpec, Rng, Tensor};

fn py_err(e: FixupError) -> PyErr {
    match e {
        FixupError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn batch(net: &CoreNetwork, rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let input = net.spec().input;
    let n = rows.len();
    let mut data = Vec::with_capacity(n * input.numel());
    for r in rows {
        if r.len() != input.numel() {
            return Err(PyValueError::new_err(format!("row has {} values, expected {}", r.len(), input.numel())));
        }
        data.extend(r);
    }
    Tensor::new(input.batch_shape(n), data).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.rows();
    let w = t.len() / n.max(1);
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

/// A residual network with its own optimizer state.
#[pyclass(module = "fixup")]
pub struct Network {
    net: CoreNetwork,
    sgd: Option<SgdState>,
}

#[pymethods]
impl Network {
    /// `input_shape` is `[dim]` for the MLP or `[channels, height, width]`
    /// for the convolutional blocks.
    #[new]
    #[pyo3(signature = (blocks=8, width=64, input_shape=vec![64], classes=10, branch_layers=2, batchnorm=false, scalar_bias=true, multiplier=true))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        blocks: usize,
        width: usize,
        input_shape: Vec<usize>,
        classes: usize,
        branch_layers: usize,
        batchnorm: bool,
        scalar_bias: bool,
        multiplier: bool,
    ) -> PyResult<Self> {
        let (input, block_kind) = match input_shape[..] {
            [d] => (InputShape::Flat(d), BlockKind::Mlp),
            [c, h, w] => (InputShape::Image { channels: c, height: h, width: w }, BlockKind::ConvBasic),
            _ => return Err(PyValueError::new_err("input_shape must have 1 or 3 entries")),
        };
        let spec = NetworkSpec {
            input,
            num_blocks: blocks,
            branch_layers,
            width,
            block_kind,
            classes,
            use_batchnorm: batchnorm,
            use_scalar_bias: scalar_bias,
            use_multiplier: multiplier,
            ..NetworkSpec::default()
        };
        Ok(Network { net: CoreNetwork::build(&spec).map_err(py_err)?, sgd: None })
    }

    /// Initializes every parameter. `scheme` is one of he, xavier, fixup,
    /// lsuv, sqrt_half; lsuv needs a `probe` batch.
    #[pyo3(signature = (scheme="fixup", seed=0, probe=None))]
    fn init(&mut self, scheme: &str, seed: u64, probe: Option<Vec<Vec<f64>>>) -> PyResult<()> {
        let kind = InitKind::parse(scheme).ok_or_else(|| PyValueError::new_err(format!("unknown scheme {scheme:?}")))?;
        let probe = probe.map(|p| batch(&self.net, p)).transpose()?;
        apply(&mut self.net, &InitScheme::new(kind), probe.as_ref(), &mut Rng::new(seed)).map_err(py_err)?;
        self.sgd = None;
        Ok(())
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.net.flat_params().len()
    }

    fn param_names(&self) -> Vec<String> {
        self.net.params().iter().map(|p| p.name.clone()).collect()
    }

    fn param(&self, name: &str) -> PyResult<Vec<f64>> {
        let id = self.net.find(name).ok_or_else(|| PyValueError::new_err(format!("no parameter {name:?}")))?;
        Ok(self.net.param(id).value.data().to_vec())
    }

    fn logits(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = batch(&self.net, x)?;
        Ok(rows(&self.net.forward(&x, Mode::Eval).map_err(py_err)?.logits))
    }

    /// `Var[x_l]` for every block output, in eval mode.
    fn variance_profile(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = batch(&self.net, x)?;
        Ok(probe::variance_profile(&self.net, &x).map_err(py_err)?.variances)
    }

    /// Largest relative error of the backward pass against fourth-order
    /// central differences with step `h`.
    #[pyo3(signature = (x, labels, h=1e-5))]
    fn gradient_check(&self, x: Vec<Vec<f64>>, labels: Vec<usize>, h: f64) -> PyResult<f64> {
        let x = batch(&self.net, x)?;
        Ok(probe::gradient_check(&self.net, &x, &labels, h).map_err(py_err)?.max_rel_err)
    }

    /// RMS logit change of one plain SGD step of size `eta`, divided by `eta`.
    fn update_ratio(&self, x: Vec<Vec<f64>>, labels: Vec<usize>, eta: f64) -> PyResult<f64> {
        let x = batch(&self.net, x)?;
        Ok(probe::measure_update(&self.net, &x, &labels, eta, false).map_err(py_err)?.ratio())
    }

    /// One SGD step on the mean cross-entropy; returns the loss before the
    /// step. Momentum buffers persist across calls until `init`.
    #[pyo3(signature = (x, labels, lr=0.1, momentum=0.9, weight_decay=5e-4))]
    fn train_step(&mut self, x: Vec<Vec<f64>>, labels: Vec<usize>, lr: f64, momentum: f64, weight_decay: f64) -> PyResult<f64> {
        let x = batch(&self.net, x)?;
        let y = one_hot(&labels, self.net.spec().classes).map_err(py_err)?;
        let cfg = TrainConfig { lr, momentum, weight_decay, ..TrainConfig::default() };
        cfg.validate().map_err(py_err)?;
        let trace = self.net.forward(&x, Mode::Train).map_err(py_err)?;
        let ce = cross_entropy(&trace.logits, &y).map_err(py_err)?;
        let grads = self.net.backward(&trace, &ce.dlogits).map_err(py_err)?;
        self.net.commit_running_stats(&trace);
        let state = self.sgd.get_or_insert_with(|| SgdState::new(&self.net));
        sgd_step(&mut self.net, &grads.params, state, &cfg, lr).map_err(py_err)?;
        Ok(ce.mean)
    }
}

/// Fixup scale `L^(-1/(2m-2))` for `L` branches of `m` layers.
#[pyfunction]
fn fixup_scale(num_branches: usize, branch_layers: usize) -> PyResult<f64> {
    fixup_core::fixup_scale(num_branches, branch_layers).map_err(py_err)
}

/// One SGD step on the scalar branch `F(x) = (prod a) x` with upstream
/// gradient `g`.
#[pyfunction]
fn scalar_branch<'py>(py: Python<'py>, a: Vec<f64>, x: f64, g: f64, eta: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = probe::scalar_branch(&a, x, g, eta).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("f", r.f)?;
    d.set_item("delta_formula", r.delta_formula)?;
    d.set_item("delta_exact", r.delta_exact)?;
    d.set_item("constraint", r.constraint)?;
    d.set_item("stuck", r.stuck)?;
    Ok(d)
}

/// Runs `verify` on a configuration text; returns the CSV and whether every
/// check passed.
#[pyfunction]
#[pyo3(signature = (config=""))]
fn verify(config: &str) -> PyResult<(String, bool)> {
    cli::run_verify(&parse_config(config).map_err(py_err)?).map_err(py_err)
}

/// Runs `train` on a configuration text and returns the metrics CSV.
#[pyfunction]
#[pyo3(signature = (config=""))]
fn train(config: &str) -> PyResult<String> {
    cli::run_train(&parse_config(config).map_err(py_err)?).map_err(py_err)
}

/// Runs the command line with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cli::run(std::iter::once("fixup".to_string()).chain(args))
}

#[pymodule]
fn fixup(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(fixup_scale, m)?)?;
    m.add_function(wrap_pyfunction!(scalar_branch, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("VERIFY_CHECKS", cli::VERIFY_CHECKS.to_vec())?;
    Ok(())
}
