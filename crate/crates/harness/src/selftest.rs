//! Oracle suites: each check recomputes a tracker quantity by an
//! independent, deliberately naive route and compares.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdt_core::convnet::{ConvLayer, FeatureMaps, HeadNet, Loss, SelectorNet};
use sdt_core::features::score_feature_saliency;
use sdt_core::prior::{extract_candidates, learn_prior_weights, SaliencyMap, ShallowFeatureStack};
use sdt_core::tracker::{find_peaks, rectify_holistic};
use sdt_core::update::temporal_weight;
use sdt_core::{BoundingBox, HeatMap, Image};
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, f: impl FnOnce() -> (bool, String)) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = f();
    CheckResult { name: name.into(), passed, detail, seconds: t.elapsed().as_secs_f64() }
}

// ---------------------------------------------------------------------------
// ridge regression

/// Largest normal-equation residual over `instances` random 19-channel,
/// 200x200 stacks, recomputing the Gram matrix with plain loops.
pub fn ridge_residual(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambdas = [0.01, 1.0, 100.0];
    let size = 200;
    let mut worst = 0.0f64;
    for case in 0..instances {
        let channels: Vec<Vec<f64>> = (0..19).map(|_| (0..size * size).map(|_| rng.gen::<f64>()).collect()).collect();
        let b = BoundingBox::new(rng.gen_range(40.0..160.0), rng.gen_range(40.0..160.0), rng.gen_range(10.0..60.0), rng.gen_range(10.0..60.0));
        let lambda = lambdas[case % 3];
        let stack = ShallowFeatureStack { size, channels };
        let w = learn_prior_weights(&stack, &b, lambda).expect("regularized system").weights;
        // target: 1 at pixels whose centers lie in the box
        let target: Vec<f64> = (0..size * size)
            .map(|i| {
                let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
                (x >= b.left() && x < b.right() && y >= b.top() && y < b.bottom()) as u8 as f64
            })
            .collect();
        for r in 0..19 {
            let mut lhs = lambda * w[r];
            for c in 0..19 {
                let mut g = 0.0;
                for p in 0..size * size {
                    g += stack.channels[r][p] * stack.channels[c][p];
                }
                lhs += g * w[c];
            }
            let mut rhs = 0.0;
            for p in 0..size * size {
                rhs += stack.channels[r][p] * target[p];
            }
            worst = worst.max((lhs - rhs).abs());
        }
    }
    worst
}

pub fn check_ridge() -> CheckResult {
    timed("ridge normal equations (25 instances)", || {
        let r = ridge_residual(25, 7);
        (r < 1e-8, format!("max |residual| = {r:.3e} (limit 1e-8)"))
    })
}

// ---------------------------------------------------------------------------
// gradients

const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn param(layer: &mut ConvLayer, i: usize) -> &mut f64 {
    let nw = layer.weights().len();
    if i < nw {
        &mut layer.weights_mut()[i]
    } else {
        &mut layer.bias_mut()[i - nw]
    }
}

fn layer_fd(layer: &mut ConvLayer, analytic_w: &[f64], analytic_b: &[f64], loss: &mut dyn FnMut(&ConvLayer) -> f64) -> f64 {
    let analytic: Vec<f64> = analytic_w.iter().chain(analytic_b).copied().collect();
    let mut worst = 0.0f64;
    for (i, a) in analytic.into_iter().enumerate() {
        let orig = *param(layer, i);
        *param(layer, i) = orig + FD_STEP;
        let up = loss(layer);
        *param(layer, i) = orig - FD_STEP;
        let down = loss(layer);
        *param(layer, i) = orig;
        worst = worst.max(rel_err(a, (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

fn random_maps(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMaps {
    FeatureMaps::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

fn random_target(rng: &mut ChaCha8Rng, h: usize, w: usize) -> HeatMap {
    HeatMap::new(w, h, (0..w * h).map(|_| rng.gen::<f64>()).collect()).expect("finite")
}

/// Worst relative error between backprop and central differences over
/// every parameter of a 9x9/5x5 head and a 3x3 selector.
pub fn gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_maps(&mut rng, 3, 10, 9);
    let target = random_target(&mut rng, 10, 9);
    let net = HeadNet::new(3, 2, 9, 5, 0.2, seed).expect("valid head");
    let (_, grads) = net.loss_and_grads(&input, &target, &Loss::Squared).expect("shapes");

    let mut probe = net.clone();
    let mut l1 = probe.layer1.clone();
    let e1 = layer_fd(&mut l1, &grads.layer1.weights, &grads.layer1.bias, &mut |l| {
        probe.layer1 = l.clone();
        probe.loss_and_grads(&input, &target, &Loss::Squared).expect("shapes").0
    });
    let mut probe = net.clone();
    let mut l2 = probe.layer2.clone();
    let e2 = layer_fd(&mut l2, &grads.layer2.weights, &grads.layer2.bias, &mut |l| {
        probe.layer2 = l.clone();
        probe.loss_and_grads(&input, &target, &Loss::Squared).expect("shapes").0
    });

    let mut sel = SelectorNet::new(3, 3, 0.3, 0.3, seed).expect("valid selector");
    let mask = sel.draw_mask(input.data().len());
    let (_, sg) = sel.loss_and_grads(&input, &target, Some(&mask)).expect("shapes");
    let mut probe = sel.clone();
    let mut conv = probe.conv.clone();
    let e3 = layer_fd(&mut conv, &sg.weights, &sg.bias, &mut |l| {
        probe.conv = l.clone();
        probe.loss_and_grads(&input, &target, Some(&mask)).expect("shapes").0
    });
    e1.max(e2).max(e3)
}

pub fn check_gradients() -> CheckResult {
    timed("finite-difference gradients", || {
        let e = (1..=3).map(gradient_error).fold(0.0, f64::max);
        (e < 1e-4, format!("max relative error = {e:.3e} (limit 1e-4)"))
    })
}

// ---------------------------------------------------------------------------
// temporal weight

/// Worst deviations: endpoints from 1, vertex case from its value, and the
/// minimum over integer frames at t = 1000 from theta.
pub fn temporal_weight_errors() -> (f64, f64, f64) {
    let mut ends = 0.0f64;
    for t in [3.0, 10.0, 100.0, 1000.0] {
        for theta in [0.3, 0.7] {
            ends = ends.max((temporal_weight(1.0, t, theta) - 1.0).abs());
            ends = ends.max((temporal_weight(t, t, theta) - 1.0).abs());
        }
    }
    // a T^2 + b T + c with a = 0.015, b = -0.165, c = 1.15 at T = 5.5
    let vertex = (temporal_weight(5.5, 10.0, 0.7) - 0.69625).abs();
    let min = (1..=1000).map(|tau| temporal_weight(tau as f64, 1000.0, 0.7)).fold(f64::MAX, f64::min);
    (ends, vertex, (min - 0.7).abs())
}

pub fn check_temporal_weight() -> CheckResult {
    timed("temporal weight endpoints and vertex", || {
        let (e, v, m) = temporal_weight_errors();
        (e < 1e-9 && v < 1e-9 && m < 0.01, format!("endpoint err {e:.1e}, vertex err {v:.1e}, |min - theta| at t=1000 {m:.4}"))
    })
}

// ---------------------------------------------------------------------------
// regional maxima

fn smooth_random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> HeatMap {
    let raw: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>()).collect();
    let radius = rng.gen_range(1..4i64);
    let mut out = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (mut s, mut n) = (0.0, 0.0);
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let (sx, sy) = (x + dx, y + dy);
                    if sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64 {
                        s += raw[sy as usize * w + sx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y as usize * w + x as usize] = s / n;
        }
    }
    // coarse quantization creates plateaus
    let levels = [8.0, 20.0, 1000.0][rng.gen_range(0..3)];
    HeatMap::new(w, h, out.into_iter().map(|v| (v * levels).round() / levels).collect()).expect("finite")
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Regional maxima by exhaustive neighbor comparison: union equal-valued
/// neighbors into plateaus, keep plateaus with no strictly higher neighbor.
/// Returns sorted `(x, y, value)` triples gated at `ratio * max`.
pub fn regional_maxima_oracle(map: &HeatMap, ratio: f64) -> Vec<(f64, f64, f64)> {
    let (w, h) = (map.width() as i64, map.height() as i64);
    let v = map.values();
    let global = v.iter().copied().fold(f64::MIN, f64::max);
    if global <= 0.0 {
        return Vec::new();
    }
    let n = v.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut dominated = vec![false; n];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if v[j] > v[i] {
                        dominated[i] = true;
                    } else if v[j] == v[i] {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        parent[a] = b;
                    }
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, (bool, f64, f64, f64)> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        let e = groups.entry(r).or_insert((false, 0.0, 0.0, 0.0));
        e.0 |= dominated[i];
        e.1 += (i as i64 % w) as f64;
        e.2 += (i as i64 / w) as f64;
        e.3 += 1.0;
    }
    let mut out: Vec<(f64, f64, f64)> = groups
        .into_iter()
        .filter(|(r, g)| !g.0 && v[*r] >= ratio * global)
        .map(|(r, g)| (g.1 / g.3, g.2 / g.3, v[r]))
        .collect();
    out.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    out
}

/// Number of random maps on which `find_peaks` disagrees with the oracle.
pub fn peak_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let (w, h) = (rng.gen_range(8..40), rng.gen_range(8..40));
        let map = smooth_random_map(&mut rng, w, h);
        for ratio in [0.0, 0.8] {
            let mut got: Vec<(f64, f64, f64)> = find_peaks(&map, ratio).into_iter().map(|p| (p.x, p.y, p.value)).collect();
            got.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            if got != regional_maxima_oracle(&map, ratio) {
                bad += 1;
            }
        }
    }
    bad
}

pub fn check_peaks() -> CheckResult {
    timed("regional maxima vs exhaustive oracle (120 maps)", || {
        let bad = peak_mismatches(120, 11);
        (bad == 0, format!("{bad} mismatching maps"))
    })
}

// ---------------------------------------------------------------------------
// connected regions

fn flood(binary: &[bool], w: usize, h: usize, x: i64, y: i64, seen: &mut [bool], out: &mut Vec<usize>) {
    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
        return;
    }
    let i = y as usize * w + x as usize;
    if !binary[i] || seen[i] {
        return;
    }
    seen[i] = true;
    out.push(i);
    for dy in -1..=1 {
        for dx in -1..=1 {
            flood(binary, w, h, x + dx, y + dy, seen, out);
        }
    }
}

/// Recursive 8-connected flood fill; components of at least `min_area`,
/// each sorted, in sorted order.
pub fn flood_fill_oracle(binary: &[bool], n: usize, min_area: f64) -> Vec<Vec<usize>> {
    let mut seen = vec![false; n * n];
    let mut comps = Vec::new();
    for i in 0..n * n {
        if binary[i] && !seen[i] {
            let mut c = Vec::new();
            flood(binary, n, n, (i % n) as i64, (i / n) as i64, &mut seen, &mut c);
            if c.len() as f64 >= min_area {
                c.sort_unstable();
                comps.push(c);
            }
        }
    }
    comps.sort();
    comps
}

/// Number of random binary maps where candidate regions differ from the
/// flood-fill oracle.
pub fn region_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let n = rng.gen_range(10..40);
        let density = rng.gen_range(0.2..0.6);
        let binary: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(density)).collect();
        let min_area = rng.gen_range(1..12) as f64;
        let blank = HeatMap::zeros(n, n);
        let smap = SaliencyMap { combined: blank.clone(), penalized: blank, binary: binary.clone(), threshold: 0.5 };
        let frame = Image::from_fn(n, n, 3, |x, y, c| ((x + 2 * y + c) % 7) as f32 / 6.0);
        let last = BoundingBox::new(n as f64 / 2.0, n as f64 / 2.0, 4.0, 4.0);
        let mut got: Vec<Vec<usize>> = extract_candidates(&smap, &frame, &last, min_area, 8).into_iter().map(|c| c.pixels).collect();
        got.sort();
        if got != flood_fill_oracle(&binary, n, min_area) {
            bad += 1;
        }
    }
    bad
}

pub fn check_regions() -> CheckResult {
    timed("connected regions vs flood fill (120 maps)", || {
        let bad = region_mismatches(120, 13);
        (bad == 0, format!("{bad} mismatching maps"))
    })
}

// ---------------------------------------------------------------------------
// channel scores

/// Worst gap between each channel's second-order score and the exact loss
/// change from zeroing that channel, over random linear selectors.
pub fn taylor_gap(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (c, h, w) = (rng.gen_range(2..7), rng.gen_range(5..12), rng.gen_range(5..12));
        let stack = random_maps(&mut rng, c, h, w);
        let target = random_target(&mut rng, h, w);
        let mut sel = SelectorNet::new(c, 3, 0.3, 0.5, seed + case as u64).expect("valid selector");
        sel.mark_trained();
        let loss = |s: &FeatureMaps| -> f64 {
            let out = sel.forward_eval(s).expect("shapes");
            out.values().iter().zip(target.values()).map(|(o, t)| (o - t) * (o - t)).sum()
        };
        let base = loss(&stack);
        let scores = score_feature_saliency(&sel, &stack, &target).expect("trained");
        for (i, s) in scores.iter().enumerate() {
            let mut zeroed = stack.clone();
            zeroed.channel_mut(i).iter_mut().for_each(|v| *v = 0.0);
            let exact = loss(&zeroed) - base;
            worst = worst.max((s - exact).abs() / exact.abs().max(1.0));
        }
    }
    worst
}

pub fn check_taylor() -> CheckResult {
    timed("second-order channel scores are exact (20 cases)", || {
        let g = taylor_gap(20, 17);
        (g < 1e-6, format!("max gap = {g:.3e} (limit 1e-6)"))
    })
}

// ---------------------------------------------------------------------------
// rectification

fn bumps(spec: &[(f64, f64, f64, f64)]) -> HeatMap {
    HeatMap::from_fn(46, 46, |x, y| {
        spec.iter()
            .map(|&(cx, cy, s, a)| a * (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * s * s)).exp())
            .fold(0.0, f64::max)
    })
}

/// The two-peak vote: holistic peaks at (10,10) and (35,35), two
/// single-peaked part maps near (35,35), two ambiguous ones.
pub fn rectification_scenario() -> (bool, String) {
    let mh = bumps(&[(10.0, 10.0, 3.0, 1.0), (35.0, 35.0, 3.0, 0.95)]);
    let parts = [
        bumps(&[(34.0, 36.0, 2.0, 1.0)]),
        bumps(&[(36.0, 34.0, 2.0, 1.0)]),
        bumps(&[(5.0, 40.0, 2.0, 1.0), (40.0, 5.0, 2.0, 1.0)]),
        bumps(&[(5.0, 5.0, 2.0, 1.0), (20.0, 40.0, 2.0, 1.0)]),
    ];
    let r = rectify_holistic(&mh, &parts, 0.8, 2);
    let sh_near = ((1.0f64).hypot(1.0) + (1.0f64).hypot(1.0)) / 2.0;
    let sh_far = ((24.0f64).hypot(26.0) + (26.0f64).hypot(24.0)) / 2.0;
    let dist_ok = r.distances.len() == 2 && (r.distances[0] - sh_far).abs() < 1e-12 && (r.distances[1] - sh_near).abs() < 1e-12;
    let far_zeroed = r.map.get(10, 10) == 0.0 && r.map.get(12, 9) == 0.0;
    let near_kept = r.map.get(35, 35) == mh.get(35, 35);
    let pointwise = r.map.values().iter().zip(mh.values()).all(|(a, b)| *a <= *b);

    let single = bumps(&[(20.0, 22.0, 4.0, 1.0)]);
    let pass = rectify_holistic(&single, &parts, 0.8, 2);
    let identical = pass.map.values().iter().zip(single.values()).all(|(a, b)| a.to_bits() == b.to_bits()) && !pass.fired;

    let ok = r.fired && r.valid_parts == 2 && dist_ok && far_zeroed && near_kept && pointwise && identical;
    (
        ok,
        format!(
            "distances {:?} (expect [{sh_far:.3}, {sh_near:.3}]), far region zeroed: {far_zeroed}, single-peak bit-identical: {identical}",
            r.distances
        ),
    )
}

pub fn check_rectification() -> CheckResult {
    timed("part-vote rectification scenario", rectification_scenario)
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        check_ridge(),
        check_gradients(),
        check_temporal_weight(),
        check_peaks(),
        check_regions(),
        check_taylor(),
        check_rectification(),
    ]
}
