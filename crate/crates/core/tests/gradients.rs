//! Central finite differences against the analytic gradients of every
//! parameter in small heads and selectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdt_core::convnet::{ConvLayer, FeatureMaps, HeadNet, Loss, SelectorNet, TruncatedLoss};
use sdt_core::HeatMap;

const STEP: f64 = 1e-5;

fn random_maps(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMaps {
    FeatureMaps::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_target(rng: &mut ChaCha8Rng, h: usize, w: usize) -> HeatMap {
    HeatMap::new(w, h, (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Perturbs each parameter of `layer` selected by `pick` and compares.
fn check_layer(
    analytic_w: &[f64],
    analytic_b: &[f64],
    layer: impl Fn(&mut dyn FnMut(&mut ConvLayer)),
    loss: &dyn Fn() -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    let n_w = analytic_w.len();
    for i in 0..n_w + analytic_b.len() {
        let nudge = |d: f64| {
            layer(&mut |l: &mut ConvLayer| {
                if i < n_w {
                    l.weights_mut()[i] += d;
                } else {
                    l.bias_mut()[i - n_w] += d;
                }
            })
        };
        nudge(STEP);
        let up = loss();
        nudge(-2.0 * STEP);
        let down = loss();
        nudge(STEP);
        let numeric = (up - down) / (2.0 * STEP);
        let a = if i < n_w { analytic_w[i] } else { analytic_b[i - n_w] };
        worst = worst.max(rel_err(a, numeric));
    }
    worst
}

fn head_case(k1: usize, k2: usize, loss: Loss, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_maps(&mut rng, 3, 7, 8);
    let target = random_target(&mut rng, 7, 8);
    let net = std::cell::RefCell::new(HeadNet::new(3, 2, k1, k2, 0.3, seed).unwrap());
    let (_, grads) = net.borrow().loss_and_grads(&input, &target, &loss).unwrap();
    let value = || net.borrow().loss_and_grads(&input, &target, &loss).unwrap().0;
    let l1 = check_layer(&grads.layer1.weights, &grads.layer1.bias, |f| f(&mut net.borrow_mut().layer1), &value);
    let l2 = check_layer(&grads.layer2.weights, &grads.layer2.bias, |f| f(&mut net.borrow_mut().layer2), &value);
    l1.max(l2)
}

#[test]
fn head_gradients_match_finite_differences() {
    for (seed, (k1, k2)) in [(9, 5), (5, 3), (3, 3)].into_iter().enumerate() {
        let err = head_case(k1, k2, Loss::Squared, seed as u64 + 1);
        assert!(err < 1e-4, "{k1}x{k1}/{k2}x{k2}: relative error {err}");
    }
}

#[test]
fn truncated_loss_gradients_match_away_from_thresholds() {
    // thresholds far below every residual keep the loss smooth in a neighborhood
    let n = 7 * 8;
    let loss = Loss::Truncated(TruncatedLoss {
        epsilon: 1e-9,
        k: 20.0,
        mu: 30.0,
        mask: (0..n).map(|i| (i % 3 != 0) as u8 as f64).collect(),
        phi: (0..n).map(|i| (i % 5) as f64 / 4.0).collect(),
    });
    let err = head_case(5, 3, loss, 11);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn selector_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = random_maps(&mut rng, 4, 6, 6);
    let target = random_target(&mut rng, 6, 6);
    let sel = std::cell::RefCell::new(SelectorNet::new(4, 3, 0.3, 0.3, 3).unwrap());
    let mask = sel.borrow_mut().draw_mask(input.data().len());
    let (_, grads) = sel.borrow().loss_and_grads(&input, &target, Some(&mask)).unwrap();
    let value = || sel.borrow().loss_and_grads(&input, &target, Some(&mask)).unwrap().0;
    let err = check_layer(&grads.weights, &grads.bias, |f| f(&mut sel.borrow_mut().conv), &value);
    assert!(err < 1e-4, "relative error {err}");
}
