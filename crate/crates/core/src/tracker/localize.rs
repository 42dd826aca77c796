//! Particle search over position and scale on the rectified heat map.

use crate::geometry::{BoundingBox, RoiTransform};
use crate::image::HeatMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TargetEstimate {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub mean_heat: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizeParams {
    pub particles: usize,
    /// translation std as a fraction of the previous box size
    pub translation_std: f64,
    /// std of the log-scale jitter
    pub scale_std: f64,
    pub gamma: f64,
    pub lambda_sigma: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

/// First-frame scale and confidence that later scales are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleReference {
    pub scale: f64,
    pub confidence: f64,
}

/// Summed-area table with a zero border row and column.
struct Integral {
    w: usize,
    h: usize,
    table: Vec<f64>,
}

impl Integral {
    fn new(map: &HeatMap) -> Self {
        let (w, h) = (map.width(), map.height());
        let mut table = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += map.get(x, y);
                table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, h, table }
    }

    /// Sum over pixels `[x0, x1) x [y0, y1)`, clipped to the map.
    fn sum(&self, x0: i64, y0: i64, x1: i64, y1: i64) -> f64 {
        let cx = |v: i64| v.clamp(0, self.w as i64) as usize;
        let cy = |v: i64| v.clamp(0, self.h as i64) as usize;
        let (x0, x1, y0, y1) = (cx(x0), cx(x1), cy(y0), cy(y1));
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let s = self.w + 1;
        self.table[y1 * s + x1] - self.table[y0 * s + x1] - self.table[y1 * s + x0] + self.table[y0 * s + x0]
    }
}

/// Pixels whose centers fall in `[lo, hi)`, as a half-open index range.
fn raster_span(lo: f64, hi: f64) -> (i64, i64) {
    ((lo - 0.5).ceil() as i64, (hi - 0.5).ceil() as i64)
}

/// Mean heat over the rasterized box; pixels outside the map count as zero.
pub fn mean_heat(integral_map: &HeatMap, b: &BoundingBox) -> f64 {
    mean_heat_with(&Integral::new(integral_map), b)
}

fn mean_heat_with(table: &Integral, b: &BoundingBox) -> f64 {
    let (x0, x1) = raster_span(b.left(), b.right());
    let (y0, y1) = raster_span(b.top(), b.bottom());
    let n = (x1 - x0).max(0) * (y1 - y0).max(0);
    if n == 0 {
        return 0.0;
    }
    table.sum(x0, y0, x1, y1) / n as f64
}

/// Draws particle centers around `center` and scales around `prev_scale`.
pub fn sample_particles<R: Rng>(
    center: (f64, f64),
    prev_scale: f64,
    base: (f64, f64),
    params: &LocalizeParams,
    rng: &mut R,
) -> Vec<(f64, f64, f64)> {
    let (w, h) = (base.0 * prev_scale, base.1 * prev_scale);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..params.particles)
        .map(|_| {
            let dx = std_normal.sample(rng) * params.translation_std * w;
            let dy = std_normal.sample(rng) * params.translation_std * h;
            let ds = (std_normal.sample(rng) * params.scale_std).exp();
            (center.0 + dx, center.1 + dy, prev_scale * ds)
        })
        .collect()
}

/// Scores frame-space particles against a heat map seen through `transform`.
pub fn score_particles(
    heat: &HeatMap,
    transform: &RoiTransform,
    base: (f64, f64),
    samples: &[(f64, f64, f64)],
    gamma: f64,
) -> Vec<Particle> {
    let table = Integral::new(heat);
    samples
        .iter()
        .map(|&(cx, cy, scale)| {
            let b = BoundingBox::scaled_from(cx, cy, base.0, base.1, scale);
            let v = mean_heat_with(&table, &transform.box_to_map(&b));
            Particle { cx, cy, scale, mean_heat: v, confidence: v * scale.powf(gamma) }
        })
        .collect()
}

/// Index of the most confident particle; ties go to the lowest index.
pub fn winner(particles: &[Particle]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in particles.iter().enumerate() {
        match best {
            Some(b) if particles[b].confidence >= p.confidence => {}
            _ => best = Some(i),
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub estimate: TargetEstimate,
    pub winner: Option<Particle>,
    pub winner_index: Option<usize>,
}

/// Particle search around `roi_center`.
///
/// Without a reference the winner's own scale is kept; with one, the scale
/// is re-derived from the confidence ratio to the first frame and clamped.
/// Returns a frozen copy of `prev` when the heat map is empty or the best
/// confidence falls below `freeze_below`.
#[allow(clippy::too_many_arguments)]
pub fn localize<R: Rng>(
    heat: &HeatMap,
    transform: &RoiTransform,
    roi_center: (f64, f64),
    prev: &TargetEstimate,
    base: (f64, f64),
    reference: Option<&ScaleReference>,
    freeze_below: Option<f64>,
    params: &LocalizeParams,
    rng: &mut R,
) -> Localization {
    let frozen = |confidence: f64| TargetEstimate { bbox: prev.bbox, confidence, frozen: true };
    if !(heat.max() > 0.0) {
        return Localization { estimate: frozen(0.0), winner: None, winner_index: None };
    }
    let samples = sample_particles(roi_center, prev.bbox.scale, base, params, rng);
    let particles = score_particles(heat, transform, base, &samples, params.gamma);
    let Some(wi) = winner(&particles) else {
        return Localization { estimate: frozen(0.0), winner: None, winner_index: None };
    };
    let best = particles[wi];
    if best.confidence <= 0.0 || freeze_below.is_some_and(|t| best.confidence < t) {
        return Localization { estimate: frozen(best.confidence), winner: Some(best), winner_index: Some(wi) };
    }
    let scale = match reference {
        Some(r) => (r.scale * (best.confidence / r.confidence).powf(params.lambda_sigma)).clamp(params.min_scale, params.max_scale),
        None => best.scale,
    };
    Localization {
        estimate: TargetEstimate {
            bbox: BoundingBox::scaled_from(best.cx, best.cy, base.0, base.1, scale),
            confidence: best.confidence,
            frozen: false,
        },
        winner: Some(best),
        winner_index: Some(wi),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> LocalizeParams {
        LocalizeParams {
            particles: 700,
            translation_std: 0.1,
            scale_std: 0.05,
            gamma: 0.7,
            lambda_sigma: 0.5,
            min_scale: 0.25,
            max_scale: 4.0,
        }
    }

    fn bump_map(cx: f64, cy: f64, s: f64) -> HeatMap {
        HeatMap::from_fn(46, 46, |x, y| {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()
        })
    }

    #[test]
    fn mean_heat_counts_outside_as_zero() {
        let m = HeatMap::from_fn(4, 4, |_, _| 1.0);
        assert_eq!(mean_heat(&m, &BoundingBox::new(2.0, 2.0, 4.0, 4.0)), 1.0);
        // half the box hangs off the left edge
        assert_eq!(mean_heat(&m, &BoundingBox::new(0.0, 2.0, 4.0, 4.0)), 0.5);
        assert_eq!(mean_heat(&m, &BoundingBox::new(-10.0, 2.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn positive_scaling_keeps_winner() {
        let t = RoiTransform::centered(100.0, 100.0, 92.0, 46);
        let m = bump_map(25.0, 20.0, 4.0);
        let s = sample_particles((100.0, 100.0), 1.0, (30.0, 30.0), &params(), &mut ChaCha8Rng::seed_from_u64(1));
        let a = winner(&score_particles(&m, &t, (30.0, 30.0), &s, 0.7));
        for k in [0.5, 3.0, 1e-3] {
            assert_eq!(winner(&score_particles(&m.scaled(k), &t, (30.0, 30.0), &s, 0.7)), a);
        }
    }

    #[test]
    fn zero_gamma_is_pure_mean_heat() {
        let t = RoiTransform::centered(100.0, 100.0, 92.0, 46);
        let m = bump_map(23.0, 23.0, 5.0);
        let s = sample_particles((100.0, 100.0), 1.0, (30.0, 30.0), &params(), &mut ChaCha8Rng::seed_from_u64(2));
        let ps = score_particles(&m, &t, (30.0, 30.0), &s, 0.0);
        let w = winner(&ps).unwrap();
        let best_v = ps.iter().map(|p| p.mean_heat).fold(0.0, f64::max);
        assert_eq!(ps[w].mean_heat, best_v);
    }

    #[test]
    fn bump_is_found_within_two_pixels() {
        // map pixel = 2 frame pixels; bump at map (27, 21) -> frame (108, 96)
        let t = RoiTransform::centered(100.0, 100.0, 92.0, 46);
        let m = bump_map(27.0, 21.0, 3.0);
        let prev = TargetEstimate { bbox: BoundingBox::new(100.0, 100.0, 24.0, 24.0), confidence: 1.0, frozen: false };
        // search centered a few pixels off the bump, as after a coarse ROI decision
        let out = localize(&m, &t, (104.0, 98.0), &prev, (24.0, 24.0), None, None, &params(), &mut ChaCha8Rng::seed_from_u64(3));
        // exhaustive grid oracle at the winner's scale
        let w = out.winner.unwrap();
        let table = Integral::new(&m);
        let mut best = (f64::MIN, 0.0, 0.0);
        for i in 0..=200 {
            for j in 0..=200 {
                let (cx, cy) = (80.0 + i as f64 * 0.25, 80.0 + j as f64 * 0.25);
                let v = mean_heat_with(&table, &t.box_to_map(&BoundingBox::scaled_from(cx, cy, 24.0, 24.0, w.scale)));
                if v > best.0 {
                    best = (v, cx, cy);
                }
            }
        }
        // the rasterized mean is piecewise constant, so the argmax is a small plateau
        assert!((best.1 - 108.0).abs() <= 2.0 && (best.2 - 96.0).abs() <= 2.0, "{best:?}");
        let b = out.estimate.bbox;
        assert!((b.cx - best.1).abs() <= 2.0 && (b.cy - best.2).abs() <= 2.0, "{b:?} vs {best:?}");
        assert!((b.cx - 108.0).abs() <= 2.0 && (b.cy - 96.0).abs() <= 2.0, "{b:?}");
    }

    #[test]
    fn empty_or_weak_heat_freezes() {
        let t = RoiTransform::centered(50.0, 50.0, 92.0, 46);
        let prev = TargetEstimate { bbox: BoundingBox::new(50.0, 50.0, 20.0, 20.0), confidence: 1.0, frozen: false };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = localize(&HeatMap::zeros(46, 46), &t, (50.0, 50.0), &prev, (20.0, 20.0), None, None, &params(), &mut rng);
        assert!(out.estimate.frozen);
        assert_eq!(out.estimate.bbox, prev.bbox);
        let m = bump_map(23.0, 23.0, 4.0).scaled(1e-3);
        let out = localize(&m, &t, (50.0, 50.0), &prev, (20.0, 20.0), None, Some(0.5), &params(), &mut rng);
        assert!(out.estimate.frozen);
    }

    #[test]
    fn higher_confidence_grows_scale() {
        let t = RoiTransform::centered(50.0, 50.0, 92.0, 46);
        let prev = TargetEstimate { bbox: BoundingBox::new(50.0, 50.0, 20.0, 20.0), confidence: 1.0, frozen: false };
        let m = bump_map(23.0, 23.0, 6.0);
        let r = ScaleReference { scale: 1.0, confidence: 0.2 };
        let out = localize(&m, &t, (50.0, 50.0), &prev, (20.0, 20.0), Some(&r), None, &params(), &mut ChaCha8Rng::seed_from_u64(5));
        assert!(out.estimate.confidence > r.confidence);
        assert!(out.estimate.bbox.scale > 1.0);
        let expect = (out.estimate.confidence / 0.2f64).powf(0.5);
        assert!((out.estimate.bbox.scale - expect.min(4.0)).abs() < 1e-12);
    }
}
