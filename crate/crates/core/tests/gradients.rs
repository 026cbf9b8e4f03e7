//! Backward pass against central differences on many small random networks.

mod common;

use common::{max_fd_error, option_grid, random_batch, random_net};
use fixup_core::net::{cross_entropy, one_hot, Mode};
use fixup_core::probe::gradient_check;
use fixup_core::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = Rng::new(2024);
    let mut checked = 0;
    for opts in option_grid() {
        for _ in 0..3 {
            let net = random_net(opts, 200, &mut rng);
            let (x, y) = random_batch(&net, 4, &mut rng);
            let (err, at) = max_fd_error(&net, &x, &y, H);
            assert!(err <= TOL, "{opts:?}: rel err {err:e} at {at}");
            checked += 1;
        }
    }
    assert!(checked >= 20);
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = Rng::new(5);
    for opts in option_grid() {
        let net = random_net(opts, 200, &mut rng);
        let (x, labels) = random_batch(&net, 3, &mut rng);
        let y = one_hot(&labels, net.spec().classes).unwrap();
        let trace = net.forward(&x, Mode::Train).unwrap();
        let ce = cross_entropy(&trace.logits, &y).unwrap();
        let g = net.backward(&trace, &ce.dlogits).unwrap();
        let pattern = trace.activation_pattern();
        let loss = |x: &fixup_core::Tensor| {
            let t = net.forward(x, Mode::Train).unwrap();
            (cross_entropy(&t.logits, &y).unwrap().mean, t.activation_pattern() == pattern)
        };
        for i in 0..x.len() {
            let mut up = x.clone();
            up.data_mut()[i] += H;
            let mut down = x.clone();
            down.data_mut()[i] -= H;
            let ((lu, su), (ld, sd)) = (loss(&up), loss(&down));
            if !(su && sd) {
                continue;
            }
            let fd = (lu - ld) / (2.0 * H);
            let an = g.input.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            assert!(rel <= TOL, "{opts:?}: input[{i}] fd {fd} analytic {an}");
        }
    }
}

#[test]
fn library_check_agrees_with_oracle() {
    let mut rng = Rng::new(77);
    for opts in option_grid() {
        let net = random_net(opts, 200, &mut rng);
        let (x, y) = random_batch(&net, 4, &mut rng);
        let lib = gradient_check(&net, &x, &y, H).unwrap();
        let (oracle, _) = max_fd_error(&net, &x, &y, H);
        assert_eq!(lib.checked + lib.skipped, net.flat_params().len());
        // Same stencil, different summation order: the two agree to round-off.
        assert!(lib.max_rel_err <= TOL && oracle <= TOL);
        assert!((lib.max_rel_err - oracle).abs() <= 1e-7, "{} vs {}", lib.max_rel_err, oracle);
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let mut rng = Rng::new(9);
    let net = random_net(option_grid()[0], 200, &mut rng);
    let (x, y) = random_batch(&net, 4, &mut rng);
    let labels = one_hot(&y, net.spec().classes).unwrap();
    let trace = net.forward(&x, Mode::Train).unwrap();
    let ce = cross_entropy(&trace.logits, &labels).unwrap();
    let mut g = net.backward(&trace, &ce.dlogits).unwrap();
    let id = net.param_ids().next().unwrap();
    g.params[id.0].data_mut()[0] += 1e-3;
    let (err, _) = max_fd_error(&net, &x, &y, H);
    assert!(err <= TOL);
    let fd_first = {
        let mut p = net.clone();
        let v = p.param(id).value.data()[0];
        p.param_mut(id).value.data_mut()[0] = v + H;
        let up = cross_entropy(&p.forward(&x, Mode::Train).unwrap().logits, &labels).unwrap().mean;
        p.param_mut(id).value.data_mut()[0] = v - H;
        let down = cross_entropy(&p.forward(&x, Mode::Train).unwrap().logits, &labels).unwrap().mean;
        (up - down) / (2.0 * H)
    };
    let an = g.params[id.0].data()[0];
    assert!((fd_first - an).abs() / fd_first.abs().max(an.abs()).max(1e-4) > TOL);
}
