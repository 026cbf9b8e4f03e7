//! Helpers shared by the integration tests: random small networks and a
//! finite-difference oracle that only uses the forward pass.

#![allow(dead_code)]

use fixup_core::net::{cross_entropy, one_hot, BlockKind, InputShape, Mode, ShortcutKind};
use fixup_core::rng::{sample, Distribution};
use fixup_core::{apply_he, apply_xavier, Network, NetworkSpec, ParamKind, Rng, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct NetOptions {
    pub kind: BlockKind,
    pub batchnorm: bool,
    pub scalars: bool,
}

/// All eight combinations of block kind, BatchNorm and scalar parameters.
/// BatchNorm excludes the multiplier, so `scalars` there means biases only.
pub fn option_grid() -> Vec<NetOptions> {
    let mut out = Vec::new();
    for kind in [BlockKind::Mlp, BlockKind::ConvBasic] {
        for batchnorm in [false, true] {
            for scalars in [false, true] {
                out.push(NetOptions { kind, batchnorm, scalars });
            }
        }
    }
    out
}

/// A random network under `max_params` parameters, He-initialized, with
/// scalar parameters perturbed away from their initial values so that
/// their gradients are generic.
pub fn random_net(opts: NetOptions, max_params: usize, rng: &mut Rng) -> Network {
    for _ in 0..10_000 {
        let (input, width) = match opts.kind {
            BlockKind::Mlp => (InputShape::Flat(2 + rng.below(5)), 2 + rng.below(5)),
            BlockKind::ConvBasic => {
                let hw = 3 + rng.below(3);
                (InputShape::Image { channels: 1 + rng.below(2), height: hw, width: hw }, 1 + rng.below(2))
            }
        };
        let stages = if opts.kind == BlockKind::ConvBasic && rng.uniform() < 0.5 {
            vec![ShortcutKind::Identity, ShortcutKind::Projection]
        } else {
            vec![ShortcutKind::Identity]
        };
        let spec = NetworkSpec {
            input,
            num_blocks: stages.len() * (1 + rng.below(2)),
            branch_layers: 2 + rng.below(2),
            width,
            block_kind: opts.kind,
            classes: 2 + rng.below(3),
            use_batchnorm: opts.batchnorm,
            use_scalar_bias: opts.scalars,
            use_multiplier: opts.scalars && !opts.batchnorm,
            stage_shortcuts: stages,
            ..NetworkSpec::default()
        };
        let mut net = Network::build(&spec).unwrap();
        if net.flat_params().len() > max_params {
            continue;
        }
        apply_he(&mut net, rng).unwrap();
        perturb_scalars(&mut net, rng);
        return net;
    }
    panic!("no {opts:?} network under {max_params} parameters");
}

pub fn perturb_scalars(net: &mut Network, rng: &mut Rng) {
    for id in net.param_ids().collect::<Vec<_>>() {
        if net.param(id).tags.kind != ParamKind::Weight {
            for v in net.param_mut(id).value.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    }
}

/// Random bias-free network for the gradient-bound checks.
pub fn random_bias_free(rng: &mut Rng) -> Network {
    let kind = if rng.uniform() < 0.5 { BlockKind::Mlp } else { BlockKind::ConvBasic };
    let input = match kind {
        BlockKind::Mlp => InputShape::Flat(4 + rng.below(12)),
        BlockKind::ConvBasic => InputShape::Image { channels: 1 + rng.below(3), height: 4, width: 4 },
    };
    let spec = NetworkSpec {
        input,
        num_blocks: 1 + rng.below(6),
        branch_layers: 2 + rng.below(2),
        width: if kind == BlockKind::Mlp { 4 + rng.below(12) } else { 2 + rng.below(3) },
        block_kind: kind,
        classes: 2 + rng.below(9),
        use_batchnorm: false,
        use_scalar_bias: false,
        use_multiplier: false,
        ..NetworkSpec::default()
    };
    let mut net = Network::build(&spec).unwrap();
    if rng.uniform() < 0.5 {
        apply_he(&mut net, rng).unwrap();
    } else {
        apply_xavier(&mut net, rng).unwrap();
    }
    net
}

pub fn random_batch(net: &Network, n: usize, rng: &mut Rng) -> (Tensor, Vec<usize>) {
    let spec = net.spec();
    let x = sample(&Distribution::Normal { mean: 0.0, std: 1.0 }, &spec.input.batch_shape(n), rng).unwrap();
    let y = (0..n).map(|_| rng.below(spec.classes)).collect();
    (x, y)
}

fn loss(net: &Network, x: &Tensor, y: &Tensor) -> (f64, Vec<usize>) {
    let t = net.forward(x, Mode::Train).unwrap();
    (cross_entropy(&t.logits, y).unwrap().mean, t.activation_pattern())
}

/// Largest relative error between the analytic parameter gradients and
/// fourth-order central differences of the train-mode mean cross-entropy,
/// skipping
/// coordinates whose stencil crosses a ReLU or max-pool kink.
pub fn max_fd_error(net: &Network, x: &Tensor, labels: &[usize], h: f64) -> (f64, String) {
    let y = one_hot(labels, net.spec().classes).unwrap();
    let trace = net.forward(x, Mode::Train).unwrap();
    let ce = cross_entropy(&trace.logits, &y).unwrap();
    let grads = net.backward(&trace, &ce.dlogits).unwrap();
    let pattern = trace.activation_pattern();
    let mut worst = (0.0, String::new());
    let mut probe = net.clone();
    for id in net.param_ids() {
        for i in 0..net.param(id).value.len() {
            let v = net.param(id).value.data()[i];
            let mut at = |k: f64| {
                probe.param_mut(id).value.data_mut()[i] = v + k * h;
                let r = loss(&probe, x, &y);
                probe.param_mut(id).value.data_mut()[i] = v;
                r
            };
            let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
            if [&p2, &p1, &m1, &m2].iter().any(|r| r.1 != pattern) {
                continue;
            }
            let fd = (8.0 * (p1.0 - m1.0) - (p2.0 - m2.0)) / (12.0 * h);
            let an = grads.param(id).data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}]", net.param(id).name));
            }
        }
    }
    worst
}
