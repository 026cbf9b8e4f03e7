//! Property tests for the structural invariants of the workbench.

mod common;

use common::{random_batch, random_bias_free};
use fixup_core::config::{config_from_echo, parse_config};
use fixup_core::data::{encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels};
use fixup_core::net::{cross_entropy, one_hot, soft_cross_entropy, Mode};
use fixup_core::probe::{
    check_block_bound, check_ph_bound, fixup_branch_model, ph_scaling_error, scalar_branch, variance_profile,
};
use fixup_core::train::{mix_with, sgd_step, SgdState, TrainConfig};
use fixup_core::{apply_fixup, InitKind, InitScheme, Network, NetworkSpec, Rng, Tensor};
use proptest::prelude::*;

fn fixup_net(blocks: usize, m: usize, seed: u64) -> Network {
    let spec = NetworkSpec { num_blocks: blocks, branch_layers: m, width: 16, input: fixup_core::net::InputShape::Flat(8), ..NetworkSpec::default() };
    let mut net = Network::build(&spec).unwrap();
    apply_fixup(&mut net, &InitScheme::new(InitKind::Fixup), &mut Rng::new(seed)).unwrap();
    net
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn gradient_bounds_hold(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let net = random_bias_free(&mut rng);
        let (x, y) = random_batch(&net, 5, &mut rng);
        for (i, &label) in y.iter().enumerate() {
            for row in check_block_bound(&net, &x.select_rows(&[i]), label).unwrap() {
                prop_assert!(row.holds, "block {}: {} < {}", row.block, row.lhs, row.rhs);
            }
        }
        for set in net.ph_sets() {
            let r = check_ph_bound(&net, &x, &y, &set).unwrap();
            prop_assert!(r.holds, "{}: {} < {}", r.label, r.lhs, r.g);
        }
    }

    #[test]
    fn ph_sets_scale_the_logits(seed in any::<u64>(), alpha in 0.1f64..10.0) {
        let mut rng = Rng::new(seed);
        let net = random_bias_free(&mut rng);
        let (x, _) = random_batch(&net, 3, &mut rng);
        for set in net.ph_sets() {
            prop_assert!(set.warning.is_none());
            let err = ph_scaling_error(&net, &x, &set, alpha).unwrap();
            prop_assert!(err <= 1e-10, "{} at alpha {alpha}: {err:e}", set.label);
        }
    }

    #[test]
    fn fixup_starts_as_identity(blocks in 1usize..12, m in 2usize..4, seed in any::<u64>()) {
        let net = fixup_net(blocks, m, seed);
        let x = fixup_core::rng::sample(
            &fixup_core::rng::Distribution::Normal { mean: 0.0, std: 1.0 },
            &[64, 8],
            &mut Rng::new(seed ^ 1),
        ).unwrap();
        let trace = net.forward(&x, Mode::Eval).unwrap();
        for a in &trace.activations[1..] {
            prop_assert_eq!(a.data(), trace.activations[0].data());
        }
        prop_assert!(trace.logits.data().iter().all(|&v| v == 0.0));
        let p = variance_profile(&net, &x).unwrap();
        prop_assert!(p.variances.iter().all(|&v| v == p.variances[0]));
    }

    #[test]
    fn scalar_branch_matches_direct_update(
        a in prop::collection::vec(0.05f64..3.0, 1..6),
        x in -3.0f64..3.0,
        g in -3.0f64..3.0,
        eta in 1e-4f64..1e-1,
    ) {
        let r = scalar_branch(&a, x, g, eta).unwrap();
        let prod: f64 = a.iter().product();
        let grad = |i: usize| g * x * a.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, v)| v).product::<f64>();
        let updated: f64 = (0..a.len()).map(|i| a[i] - eta * grad(i)).product();
        let exact = (updated - prod) * x;
        let formula = -eta * g * (0..a.len()).map(|i| (grad(i) / g).powi(2)).sum::<f64>();
        prop_assert!((r.f - prod * x).abs() <= 1e-12 * (prod * x).abs().max(1.0));
        prop_assert!((r.delta_exact - exact).abs() <= 1e-12 * exact.abs().max(1e-12));
        prop_assert!((r.delta_formula - formula).abs() <= 1e-12 * formula.abs().max(1e-12));
    }

    #[test]
    fn fixup_model_meets_constraint(l in 1usize..5000, m in 2usize..5) {
        let a = fixup_branch_model(l, m).unwrap();
        let c = scalar_branch(&a, 1.0, 1.0, 0.0).unwrap().constraint;
        prop_assert!((c * (l as f64).sqrt() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn soft_loss_is_linear_in_targets(seed in any::<u64>(), lambda in 0.0f64..1.0) {
        let mut rng = Rng::new(seed);
        let z = fixup_core::rng::sample(&fixup_core::rng::Distribution::Normal { mean: 0.0, std: 3.0 }, &[6, 5], &mut rng).unwrap();
        let y: Vec<usize> = (0..6).map(|_| rng.below(5)).collect();
        let x = Tensor::zeros(&[6, 2]);
        let hard = one_hot(&y, 5).unwrap();
        let perm = rng.permutation(6);
        let mixed = mix_with(&x, &hard, lambda, &perm).unwrap();
        let soft = soft_cross_entropy(&z, &mixed.targets).unwrap();
        let a = cross_entropy(&z, &hard).unwrap();
        let b = cross_entropy(&z, &hard.select_rows(&perm)).unwrap();
        for i in 0..6 {
            let want = lambda * a.losses[i] + (1.0 - lambda) * b.losses[i];
            prop_assert!((soft.losses[i] - want).abs() <= 1e-10 * want.abs().max(1e-300));
        }
    }

    #[test]
    fn idx_round_trips(n in 1usize..6, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let pixels: Vec<u8> = (0..n * rows * cols).map(|_| rng.below(256) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.below(10) as u8).collect();
        let img = parse_idx_images(&encode_idx_images(n, rows, cols, &pixels).unwrap()).unwrap();
        prop_assert_eq!(img.shape(), &[n, 1, rows, cols][..]);
        for (v, p) in img.data().iter().zip(&pixels) {
            prop_assert_eq!(*v, *p as f64 / 255.0);
        }
        let back = parse_idx_labels(&encode_idx_labels(&labels)).unwrap();
        prop_assert_eq!(back, labels.iter().map(|&l| l as usize).collect::<Vec<_>>());
    }

    #[test]
    fn config_echo_round_trips(lr in 0.001f64..1.0, blocks in 1usize..100, seed in 0u64..1000, alpha in 0.0f64..2.0) {
        let text = format!("train.lr = {lr}\narch.blocks = {blocks}\nrun.seeds = {seed},{}\ntrain.mixup_alpha = {alpha}\n", seed + 1);
        let cfg = parse_config(&text).unwrap();
        let again = config_from_echo(&cfg.echo()).unwrap();
        prop_assert_eq!(cfg.echo(), again.echo());
        prop_assert_eq!(again.train.lr, lr);
    }
}

#[test]
fn sgd_matches_hand_written_momentum() {
    let mut rng = Rng::new(3);
    let spec = NetworkSpec { num_blocks: 2, width: 4, input: fixup_core::net::InputShape::Flat(3), classes: 3, ..NetworkSpec::default() };
    let mut net = Network::build(&spec).unwrap();
    fixup_core::apply_he(&mut net, &mut rng).unwrap();
    common::perturb_scalars(&mut net, &mut rng);
    let cfg = TrainConfig { lr: 0.05, momentum: 0.9, weight_decay: 1e-3, scalar_lr_multiplier: 0.1, ..TrainConfig::default() };
    let mut state = SgdState::new(&net);
    let mut theta: Vec<Vec<f64>> = net.params().iter().map(|p| p.value.data().to_vec()).collect();
    let mut vel: Vec<Vec<f64>> = theta.iter().map(|t| vec![0.0; t.len()]).collect();
    for _ in 0..3 {
        let grads: Vec<Tensor> = net
            .params()
            .iter()
            .map(|p| fixup_core::rng::sample(&fixup_core::rng::Distribution::Normal { mean: 0.0, std: 1.0 }, p.value.shape(), &mut rng).unwrap())
            .collect();
        sgd_step(&mut net, &grads, &mut state, &cfg, cfg.lr).unwrap();
        for (k, p) in net.params().iter().enumerate() {
            let weight = p.tags.kind == fixup_core::ParamKind::Weight;
            let (wd, lr) = if weight { (cfg.weight_decay, cfg.lr) } else { (0.0, cfg.lr * 0.1) };
            for i in 0..theta[k].len() {
                vel[k][i] = 0.9 * vel[k][i] + grads[k].data()[i] + wd * theta[k][i];
                theta[k][i] -= lr * vel[k][i];
            }
            for (a, b) in p.value.data().iter().zip(&theta[k]) {
                assert!((a - b).abs() <= 1e-14, "{}: {a} vs {b}", p.name);
            }
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut net = fixup_net(3, 2, 1);
    let before = net.flat_params();
    let mut state = SgdState::new(&net);
    let grads: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    sgd_step(&mut net, &grads, &mut state, &TrainConfig::default(), 0.0).unwrap();
    assert_eq!(before, net.flat_params());
}
