//! Shallow-cue prior map: picks a search window before the deep stage runs.
//!
//! Frames are warped to a square grid, described by nineteen low-level
//! channels, combined with weights fitted on the first frame, penalized by
//! distance to the previous center and binarized. Connected regions become
//! candidate windows which are matched against a fixed first-frame template.

use crate::config::CenterPenalty;
use crate::error::{Result, SdtError};
use crate::geometry::BoundingBox;
use crate::image::{HeatMap, Image};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::sync::Arc;

pub const STEERABLE_SCALES: usize = 3;
pub const STEERABLE_ORIENTATIONS: usize = 4;
/// Oriented subbands plus the lowpass residual.
pub const STEERABLE_CHANNELS: usize = STEERABLE_SCALES * STEERABLE_ORIENTATIONS + 1;
pub const SHALLOW_CHANNELS: usize = STEERABLE_CHANNELS + 6;

pub const CHANNEL_R: usize = STEERABLE_CHANNELS;
pub const CHANNEL_G: usize = STEERABLE_CHANNELS + 1;
pub const CHANNEL_B: usize = STEERABLE_CHANNELS + 2;
pub const CHANNEL_Y: usize = STEERABLE_CHANNELS + 3;
pub const CHANNEL_I: usize = STEERABLE_CHANNELS + 4;
pub const CHANNEL_SKIN: usize = STEERABLE_CHANNELS + 5;

/// Maxima below this are numerical noise and normalize to an all-zero map.
const NORMALIZE_FLOOR: f64 = 1e-9;

// Skin membership: ellipse in (Cb, Cr) on the 0..255 scale.
const SKIN_CB: f64 = 102.0;
const SKIN_CB_HALF_WIDTH: f64 = 25.0;
const SKIN_CR: f64 = 153.0;
const SKIN_CR_HALF_WIDTH: f64 = 20.0;

/// Log-radial highpass: 1 above pi/2, 0 below pi/4.
fn radial_high(r: f64) -> f64 {
    if r >= FRAC_PI_2 {
        1.0
    } else if r <= FRAC_PI_4 {
        0.0
    } else {
        (FRAC_PI_2 * (2.0 * r / PI).log2()).cos()
    }
}

/// Complement of [`radial_high`]: `high^2 + low^2 = 1`.
fn radial_low(r: f64) -> f64 {
    if r <= FRAC_PI_4 {
        1.0
    } else if r >= FRAC_PI_2 {
        0.0
    } else {
        (FRAC_PI_2 * (4.0 * r / PI).log2()).cos()
    }
}

/// Radial profile of subband `scale` (0 = finest), or of the residual when
/// `scale == STEERABLE_SCALES`.
fn radial_profile(r: f64, scale: usize) -> f64 {
    let mut v = radial_low(r / 2.0);
    for j in 0..scale {
        v *= radial_low(r * (1u32 << j) as f64);
    }
    if scale < STEERABLE_SCALES {
        v *= radial_high(r * (1u32 << scale) as f64);
    }
    v
}

/// One-sided angular window around direction `k * pi / 4`. Keeping a single
/// half-plane makes the subband analytic, so its magnitude is local energy.
fn angular_profile(theta: f64, orientation: usize) -> f64 {
    let c = (theta - orientation as f64 * PI / STEERABLE_ORIENTATIONS as f64).cos();
    if c > 0.0 {
        2.0 * c * c * c
    } else {
        0.0
    }
}

/// Signed angular frequency of FFT bin `i` out of `n`.
fn bin_frequency(i: usize, n: usize) -> f64 {
    let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
    2.0 * PI * k / n as f64
}

/// Frequency response of oriented subband `(scale, orientation)` at `(wx, wy)`.
pub fn subband_response(scale: usize, orientation: usize, wx: f64, wy: f64) -> f64 {
    let r = wx.hypot(wy);
    if r == 0.0 {
        return 0.0;
    }
    radial_profile(r, scale) * angular_profile(wy.atan2(wx), orientation)
}

/// Undecimated frequency-domain steerable pyramid on a square grid.
pub struct SteerablePyramid {
    size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// 12 oriented masks (scale-major) then the residual mask
    masks: Vec<Vec<f64>>,
}

impl std::fmt::Debug for SteerablePyramid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SteerablePyramid").field("size", &self.size).finish()
    }
}

impl SteerablePyramid {
    pub fn new(size: usize) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(size);
        let inverse = planner.plan_fft_inverse(size);
        let mut masks = Vec::with_capacity(STEERABLE_CHANNELS);
        for s in 0..STEERABLE_SCALES {
            for k in 0..STEERABLE_ORIENTATIONS {
                masks.push(Self::mask(size, |wx, wy| subband_response(s, k, wx, wy)));
            }
        }
        masks.push(Self::mask(size, |wx, wy| radial_profile(wx.hypot(wy), STEERABLE_SCALES)));
        Self { size, forward, inverse, masks }
    }

    fn mask(size: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let mut m = Vec::with_capacity(size * size);
        for v in 0..size {
            for u in 0..size {
                m.push(f(bin_frequency(u, size), bin_frequency(v, size)));
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn transform(&self, data: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let n = self.size;
        fft.process(data);
        transpose(data, n);
        fft.process(data);
        transpose(data, n);
    }

    /// Raw subbands: 12 oriented magnitudes (index `scale * 4 + orientation`)
    /// followed by the lowpass residual.
    pub fn decompose(&self, plane: &[f64]) -> Vec<Vec<f64>> {
        let n = self.size;
        assert_eq!(plane.len(), n * n);
        let mut spectrum: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut spectrum, &self.forward);
        let norm = 1.0 / (n * n) as f64;
        self.masks
            .iter()
            .enumerate()
            .map(|(i, mask)| {
                let mut band: Vec<Complex64> = spectrum.iter().zip(mask).map(|(s, m)| s * m).collect();
                self.transform(&mut band, &self.inverse);
                if i + 1 == self.masks.len() {
                    band.iter().map(|c| c.re * norm).collect()
                } else {
                    band.iter().map(|c| c.norm() * norm).collect()
                }
            })
            .collect()
    }
}

fn transpose(data: &mut [Complex64], n: usize) {
    for y in 0..n {
        for x in y + 1..n {
            data.swap(y * n + x, x * n + y);
        }
    }
}

/// Divides by the maximum; near-zero or non-positive maxima give zeros.
fn max_normalize(v: &mut [f64]) {
    let m = v.iter().copied().fold(0.0, f64::max);
    if m <= NORMALIZE_FLOOR {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x = (x.max(0.0) / m).min(1.0));
    }
}

fn skin_likelihood(r: f64, g: f64, b: f64) -> f64 {
    let (r, g, b) = (r * 255.0, g * 255.0, b * 255.0);
    let cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    let u = (cb - SKIN_CB) / SKIN_CB_HALF_WIDTH;
    let v = (cr - SKIN_CR) / SKIN_CR_HALF_WIDTH;
    (1.0 - u * u - v * v).max(0.0)
}

/// Nineteen max-normalized low-level maps on a square grid: 13 steerable
/// channels, then R, G, B, Y opponency, intensity and skin likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct ShallowFeatureStack {
    pub size: usize,
    pub channels: Vec<Vec<f64>>,
}

/// Computes [`ShallowFeatureStack`]s; holds the FFT plans and masks.
#[derive(Debug)]
pub struct ShallowExtractor {
    pyramid: SteerablePyramid,
}

impl ShallowExtractor {
    pub fn new(size: usize) -> Self {
        Self { pyramid: SteerablePyramid::new(size) }
    }

    pub fn size(&self) -> usize {
        self.pyramid.size()
    }

    pub fn extract(&self, frame: &Image) -> Result<ShallowFeatureStack> {
        if !frame.is_color() {
            return Err(SdtError::GrayscalePrior(frame.channels()));
        }
        let n = self.size();
        let warped = frame.resize_bilinear(n, n);
        let (r, g, b) = (warped.plane(0), warped.plane(1), warped.plane(2));
        let intensity = warped.intensity();
        let mut channels = self.pyramid.decompose(&intensity);
        let mut red = Vec::with_capacity(n * n);
        let mut green = Vec::with_capacity(n * n);
        let mut blue = Vec::with_capacity(n * n);
        let mut yellow = Vec::with_capacity(n * n);
        let mut skin = Vec::with_capacity(n * n);
        for i in 0..n * n {
            let (r, g, b) = (r[i], g[i], b[i]);
            red.push((r - (g + b) / 2.0).max(0.0));
            green.push((g - (r + b) / 2.0).max(0.0));
            blue.push((b - (r + g) / 2.0).max(0.0));
            yellow.push(((r + g) / 2.0 - (r - g).abs() / 2.0 - b).max(0.0));
            skin.push(skin_likelihood(r, g, b));
        }
        channels.extend([red, green, blue, yellow, intensity, skin]);
        for c in &mut channels {
            max_normalize(c);
        }
        Ok(ShallowFeatureStack { size: n, channels })
    }
}

/// Scale factors between a frame and the square prior grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameGrid {
    pub frame_width: f64,
    pub frame_height: f64,
    pub size: usize,
}

impl FrameGrid {
    pub fn new(frame: &Image, size: usize) -> Self {
        Self { frame_width: frame.width() as f64, frame_height: frame.height() as f64, size }
    }

    fn sx(&self) -> f64 {
        self.size as f64 / self.frame_width
    }

    fn sy(&self) -> f64 {
        self.size as f64 / self.frame_height
    }

    pub fn to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.sx(), y * self.sy())
    }

    pub fn to_frame(&self, gx: f64, gy: f64) -> (f64, f64) {
        (gx / self.sx(), gy / self.sy())
    }

    pub fn box_to_grid(&self, b: &BoundingBox) -> BoundingBox {
        let (cx, cy) = self.to_grid(b.cx, b.cy);
        BoundingBox { cx, cy, w: b.w * self.sx(), h: b.h * self.sy(), scale: b.scale }
    }

    /// Converts a frame-pixel area to grid pixels.
    pub fn area_to_grid(&self, area: f64) -> f64 {
        area * self.sx() * self.sy()
    }
}

/// Per-channel weights of the prior map, fitted once on the first frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorWeights {
    pub weights: Vec<f64>,
}

/// Solves `(F^T F + lambda I) w = F^T t` for column-major features `F`.
///
/// Cholesky factorization with one round of iterative refinement.
pub fn solve_ridge(columns: &[Vec<f64>], target: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let n = columns.len();
    if n == 0 || columns.iter().any(|c| c.len() != target.len()) {
        return Err(SdtError::Shape("ridge columns must match the target length".into()));
    }
    if !(lambda >= 0.0) {
        return Err(SdtError::Config(format!("lambda_s = {lambda}")));
    }
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = columns[i].iter().zip(&columns[j]).map(|(x, y)| x * y).sum();
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
        a[i * n + i] += lambda;
    }
    let b: Vec<f64> = columns.iter().map(|c| c.iter().zip(target).map(|(x, y)| x * y).sum()).collect();
    // with lambda > 0 the system is positive definite by construction; only an
    // unregularized solve needs a rank guard
    let floor = if lambda > 0.0 { 0.0 } else { 1e-10 };
    let l = cholesky(&a, n, floor).ok_or(SdtError::SingularSystem)?;
    let mut x = cholesky_solve(&l, n, &b);
    let residual: Vec<f64> = (0..n)
        .map(|i| b[i] - (0..n).map(|j| a[i * n + j] * x[j]).sum::<f64>())
        .collect();
    let dx = cholesky_solve(&l, n, &residual);
    x.iter_mut().zip(&dx).for_each(|(v, d)| *v += d);
    Ok(x)
}

/// Lower-triangular factor, or `None` when a pivot is not safely positive.
fn cholesky(a: &[f64], n: usize, relative_floor: f64) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    if scale <= 0.0 {
        return None;
    }
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= relative_floor * scale {
            return None;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x
}

/// Binary mask of grid pixels whose centers fall inside `b` (grid coordinates).
pub fn box_mask(b: &BoundingBox, size: usize) -> Vec<f64> {
    let mut m = vec![0.0; size * size];
    for y in 0..size {
        let py = y as f64 + 0.5;
        if py < b.top() || py >= b.bottom() {
            continue;
        }
        for x in 0..size {
            let px = x as f64 + 0.5;
            if px >= b.left() && px < b.right() {
                m[y * size + x] = 1.0;
            }
        }
    }
    m
}

/// Fits the channel weights that best reproduce the first-frame box mask.
pub fn learn_prior_weights(stack: &ShallowFeatureStack, gt_box_grid: &BoundingBox, lambda: f64) -> Result<PriorWeights> {
    gt_box_grid.validate()?;
    let mask = box_mask(gt_box_grid, stack.size);
    Ok(PriorWeights { weights: solve_ridge(&stack.channels, &mask, lambda)? })
}

/// Weighted channel sum, center-penalized map and its binarization.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub combined: HeatMap,
    /// penalized map, max-normalized to `[0, 1]`
    pub penalized: HeatMap,
    pub binary: Vec<bool>,
    pub threshold: f64,
}

impl SaliencyMap {
    pub fn size(&self) -> usize {
        self.combined.width()
    }
}

pub fn build_saliency_map(
    stack: &ShallowFeatureStack,
    weights: &PriorWeights,
    prev_center: (f64, f64),
    sigma_b: f64,
    delta_s: f64,
    penalty: CenterPenalty,
) -> Result<SaliencyMap> {
    let n = stack.size;
    if weights.weights.len() != stack.channels.len() {
        return Err(SdtError::Shape(format!(
            "{} weights for {} channels",
            weights.weights.len(),
            stack.channels.len()
        )));
    }
    let (px, py) = prev_center;
    if !(px >= 0.0 && px <= n as f64 && py >= 0.0 && py <= n as f64) {
        return Err(SdtError::Coordinates(format!("previous center ({px:.1},{py:.1}) outside the prior grid")));
    }
    let mut combined = vec![0.0; n * n];
    for (w, ch) in weights.weights.iter().zip(&stack.channels) {
        if *w != 0.0 {
            combined.iter_mut().zip(ch).for_each(|(c, v)| *c += w * v);
        }
    }
    let corners = [(0.0, 0.0), (n as f64, 0.0), (0.0, n as f64), (n as f64, n as f64)];
    let max_dist = corners.iter().map(|(x, y)| (x - px).hypot(y - py)).fold(0.0, f64::max);
    let mut penalized = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let d = (x as f64 + 0.5 - px).hypot(y as f64 + 0.5 - py) / max_dist;
            let c = match penalty {
                CenterPenalty::Decreasing => delta_s * (1.0 - d),
                CenterPenalty::Literal => delta_s * d,
            };
            penalized[y * n + x] = c * combined[y * n + x];
        }
    }
    max_normalize(&mut penalized);
    let binary = penalized.iter().map(|&v| v > 0.0 && v >= sigma_b).collect();
    Ok(SaliencyMap {
        combined: HeatMap::new(n, n, combined)?,
        penalized: HeatMap::new(n, n, penalized)?,
        binary,
        threshold: sigma_b,
    })
}

/// 8-connected components of a binary raster by run labeling.
///
/// Returns pixel index lists in raster order, components ordered by their
/// first pixel.
pub fn label_components(binary: &[bool], width: usize, height: usize) -> Vec<Vec<usize>> {
    assert_eq!(binary.len(), width * height);
    // (row, start, end_exclusive) per run
    let mut runs: Vec<(usize, usize, usize)> = Vec::new();
    let mut row_first = vec![0usize; height + 1];
    for y in 0..height {
        row_first[y] = runs.len();
        let row = &binary[y * width..(y + 1) * width];
        let mut x = 0;
        while x < width {
            if row[x] {
                let s = x;
                while x < width && row[x] {
                    x += 1;
                }
                runs.push((y, s, x));
            } else {
                x += 1;
            }
        }
    }
    row_first[height] = runs.len();

    let mut parent: Vec<usize> = (0..runs.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for y in 1..height {
        let prev = row_first[y - 1]..row_first[y];
        for cur in row_first[y]..row_first[y + 1] {
            let (_, s, e) = runs[cur];
            for p in prev.clone() {
                let (_, ps, pe) = runs[p];
                if ps <= e && pe >= s {
                    let (a, b) = (find(&mut parent, p), find(&mut parent, cur));
                    if a != b {
                        // keep the earlier run as root so labels follow raster order
                        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                        parent[hi] = lo;
                    }
                }
            }
        }
    }
    let mut label_of_root = vec![usize::MAX; runs.len()];
    let mut regions: Vec<Vec<usize>> = Vec::new();
    let mut run_label = vec![0usize; runs.len()];
    for i in 0..runs.len() {
        let r = find(&mut parent, i);
        if label_of_root[r] == usize::MAX {
            label_of_root[r] = regions.len();
            regions.push(Vec::new());
        }
        run_label[i] = label_of_root[r];
    }
    for (i, &(y, s, e)) in runs.iter().enumerate() {
        regions[run_label[i]].extend((s..e).map(|x| y * width + x));
    }
    regions
}

/// A salient connected region and the frame patch around it.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionCandidate {
    /// grid pixel indices, raster order
    pub pixels: Vec<usize>,
    pub centroid_grid: (f64, f64),
    pub centroid: (f64, f64),
    /// last-box-sized crop at the centroid, resampled to the template raster
    pub patch: Image,
}

impl RegionCandidate {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Crops a `w x h` window centered at `(cx, cy)`, shifted to stay inside the
/// frame where possible, resampled to `out x out`.
pub fn crop_window(frame: &Image, cx: f64, cy: f64, w: f64, h: f64, out: usize) -> Image {
    let fit = |c: f64, len: f64, limit: f64| {
        if len >= limit {
            limit / 2.0
        } else {
            c.clamp(len / 2.0, limit - len / 2.0)
        }
    };
    let cx = fit(cx, w, frame.width() as f64);
    let cy = fit(cy, h, frame.height() as f64);
    frame.crop_resized(cx - w / 2.0, cy - h / 2.0, w, h, out, out)
}

/// Connected salient regions of at least `min_area` grid pixels.
pub fn extract_candidates(
    smap: &SaliencyMap,
    frame: &Image,
    last_box: &BoundingBox,
    min_area: f64,
    patch_size: usize,
) -> Vec<RegionCandidate> {
    let n = smap.size();
    let grid = FrameGrid::new(frame, n);
    label_components(&smap.binary, n, n)
        .into_iter()
        .filter(|px| px.len() as f64 >= min_area)
        .map(|pixels| {
            let k = pixels.len() as f64;
            let gx = pixels.iter().map(|&i| (i % n) as f64 + 0.5).sum::<f64>() / k;
            let gy = pixels.iter().map(|&i| (i / n) as f64 + 0.5).sum::<f64>() / k;
            let (fx, fy) = grid.to_frame(gx, gy);
            let patch = crop_window(frame, fx, fy, last_box.w, last_box.h, patch_size);
            RegionCandidate { pixels, centroid_grid: (gx, gy), centroid: (fx, fy), patch }
        })
        .collect()
}

/// Re-crops each candidate patch at the offset within `radius` pixels of
/// its centroid, on a grid of `step`, that best matches `template`.
///
/// Region centroids jitter by a pixel or so between frames, and raw-pixel
/// distances on sharp-edged targets react strongly to that and to the
/// sub-pixel phase of the resampling. Zero offset wins ties; a zero radius
/// leaves the patches untouched.
pub fn align_candidates(cands: &mut [RegionCandidate], frame: &Image, last_box: &BoundingBox, template: &Image, radius: f64, step: f64) {
    if !(radius > 0.0 && step > 0.0) {
        return;
    }
    let n = (radius / step).floor() as i64;
    let out = template.width();
    for c in cands.iter_mut() {
        let mut best = patch_distance(&c.patch, template);
        for iy in -n..=n {
            for ix in -n..=n {
                if (ix, iy) == (0, 0) {
                    continue;
                }
                let (x, y) = (c.centroid.0 + ix as f64 * step, c.centroid.1 + iy as f64 * step);
                let patch = crop_window(frame, x, y, last_box.w, last_box.h, out);
                let d = patch_distance(&patch, template);
                if d < best {
                    best = d;
                    c.patch = patch;
                }
            }
        }
    }
}

/// Sum of squared differences over all samples of two equally shaped images.
pub fn patch_distance(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.data().len(), b.data().len());
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// Template confidence `exp(-delta_c * d^2)`.
pub fn template_confidence(patch: &Image, template: &Image, delta_c: f64) -> f64 {
    (-delta_c * patch_distance(patch, template)).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoiDecision {
    pub center: (f64, f64),
    pub used_prior: bool,
    /// best template confidence, 0 when there were no candidates
    pub confidence: f64,
    pub winner: Option<usize>,
    pub scores: Vec<f64>,
}

/// Picks the ROI center from candidate regions or falls back to `last_center`.
///
/// Candidates whose confidence is within `tie_tolerance` (relative) of the
/// best are treated as tied and resolved by centroid distance to
/// `last_center`, which keeps the choice independent of candidate order.
pub fn decide_roi(
    cands: &[RegionCandidate],
    template: &Image,
    last_center: (f64, f64),
    sigma_c: f64,
    delta_c: f64,
    tie_tolerance: f64,
) -> RoiDecision {
    let scores: Vec<f64> = cands.iter().map(|c| template_confidence(&c.patch, template, delta_c)).collect();
    let best = scores.iter().copied().fold(0.0, f64::max);
    let fallback = RoiDecision { center: last_center, used_prior: false, confidence: best, winner: None, scores: scores.clone() };
    if cands.is_empty() || best <= sigma_c {
        return fallback;
    }
    let dist = |c: &RegionCandidate| (c.centroid.0 - last_center.0).hypot(c.centroid.1 - last_center.1);
    let winner = (0..cands.len())
        .filter(|&i| scores[i] >= best * (1.0 - tie_tolerance))
        .min_by(|&a, &b| {
            dist(&cands[a])
                .total_cmp(&dist(&cands[b]))
                .then(cands[a].centroid.0.total_cmp(&cands[b].centroid.0))
                .then(cands[a].centroid.1.total_cmp(&cands[b].centroid.1))
        })
        .expect("best candidate exists");
    RoiDecision {
        center: cands[winner].centroid,
        used_prior: true,
        confidence: scores[winner],
        winner: Some(winner),
        scores,
    }
}
