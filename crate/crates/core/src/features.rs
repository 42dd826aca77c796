//! Deep feature stacks, the provider interface, and channel selection.
//!
//! The tracker never talks to a backbone directly. A [`FeatureProvider`]
//! turns an ROI raster into two stacks at the heat-map resolution: a finer
//! one standing in for mid-level convolutional features and a coarser one
//! standing in for high-level features. [`StandInProvider`] computes a fixed
//! filter bank so the pipeline runs without external weights;
//! [`FileProvider`] replays precomputed stacks from disk.

use crate::convnet::{FeatureMaps, LayerGrads, Loss, SelectorNet};
use crate::error::{Result, SdtError};
use crate::image::{resize_plane, HeatMap, Image};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureSource {
    /// finer, mid-level stack feeding the part heads
    Conv4Like,
    /// coarser, high-level stack feeding the holistic head
    Conv5Like,
}

impl FeatureSource {
    pub fn tag(self) -> u8 {
        match self {
            FeatureSource::Conv4Like => 0,
            FeatureSource::Conv5Like => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(FeatureSource::Conv4Like),
            1 => Some(FeatureSource::Conv5Like),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepFeatureStack {
    pub source: FeatureSource,
    pub maps: FeatureMaps,
}

/// Source of per-ROI feature stacks. Implementations must be deterministic.
pub trait FeatureProvider: Send + Sync {
    /// Side of the square raster the ROI is resampled to before `provide`.
    fn input_size(&self) -> usize;

    /// Number of channels in each returned stack.
    fn channels(&self) -> usize;

    /// Returns `(conv4-like, conv5-like)` stacks, both `map_size x map_size`.
    fn provide(&self, roi: &Image, frame_id: u32) -> Result<(DeepFeatureStack, DeepFeatureStack)>;
}

// ---------------------------------------------------------------------------
// stand-in filter bank

pub const STAND_IN_CHANNELS: usize = 64;

/// Channels of the stand-in bank that average rather than differentiate;
/// every other channel is zero on a constant image.
pub const STAND_IN_LOWPASS: [usize; 14] = [0, 1, 2, 3, 4, 5, 6, 50, 51, 52, 53, 54, 55, 56];

fn gaussian_kernels(sigma: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let radius = (3.0 * sigma).ceil() as i64;
    let xs: Vec<f64> = (-radius..=radius).map(|x| x as f64).collect();
    let mut g: Vec<f64> = xs.iter().map(|x| (-x * x / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    // derivative kernels scaled by sigma (resp. sigma^2) so responses are
    // comparable across scales
    let d1: Vec<f64> = xs.iter().zip(&g).map(|(x, g)| -x / sigma * g).collect();
    let mut d2: Vec<f64> = xs.iter().zip(&g).map(|(x, g)| (x * x / (sigma * sigma) - 1.0) * g).collect();
    let m = d2.iter().sum::<f64>() / d2.len() as f64;
    d2.iter_mut().for_each(|v| *v -= m);
    (g, d1, d2)
}

/// Separable correlation with border replication.
fn separable(plane: &[f64], w: usize, h: usize, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    let rx = (kx.len() / 2) as i64;
    let ry = (ky.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kx.iter().enumerate() {
                let sx = (x as i64 + i as i64 - rx).clamp(0, w as i64 - 1) as usize;
                acc += k * row[sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (i, k) in ky.iter().enumerate() {
            let sy = (y as i64 + i as i64 - ry).clamp(0, h as i64 - 1) as usize;
            let src = &tmp[sy * w..(sy + 1) * w];
            for (o, s) in out[y * w..(y + 1) * w].iter_mut().zip(src) {
                *o += k * s;
            }
        }
    }
    out
}

struct Derivs {
    dx: Vec<f64>,
    dy: Vec<f64>,
}

fn derivs(plane: &[f64], w: usize, h: usize, sigma: f64) -> Derivs {
    let (g, d1, _) = gaussian_kernels(sigma);
    Derivs {
        dx: separable(plane, w, h, &d1, &g),
        dy: separable(plane, w, h, &g, &d1),
    }
}

fn positive(v: &[f64], gain: f64) -> Vec<f64> {
    v.iter().map(|x| (x * gain).max(0.0)).collect()
}

fn negative(v: &[f64], gain: f64) -> Vec<f64> {
    v.iter().map(|x| (-x * gain).max(0.0)).collect()
}

fn oriented(d: &Derivs, angle: f64) -> Vec<f64> {
    let (c, s) = (angle.cos(), angle.sin());
    d.dx.iter().zip(&d.dy).map(|(x, y)| c * x + s * y).collect()
}

const ORIENTATIONS: [f64; 4] = [0.0, std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_2, 3.0 * std::f64::consts::FRAC_PI_4];
const GAIN: f64 = 2.0;

/// Applies the 64-channel bank to an RGB raster.
fn filter_bank(img: &Image) -> Vec<Vec<f64>> {
    let (w, h) = (img.width(), img.height());
    let rgb = img.to_rgb();
    let (r, g, b) = (rgb.plane(0), rgb.plane(1), rgb.plane(2));
    let n = w * h;
    let intensity: Vec<f64> = (0..n).map(|i| (r[i] + g[i] + b[i]) / 3.0).collect();
    let rg: Vec<f64> = (0..n).map(|i| r[i] - g[i]).collect();
    let by: Vec<f64> = (0..n).map(|i| b[i] - (r[i] + g[i]) / 2.0).collect();
    let sat: Vec<f64> = (0..n).map(|i| r[i].max(g[i]).max(b[i]) - r[i].min(g[i]).min(b[i])).collect();
    let color = [&r, &g, &b, &intensity, &rg, &by, &sat];

    let mut out: Vec<Vec<f64>> = Vec::with_capacity(STAND_IN_CHANNELS);
    // 0..7 color means at a fine scale
    let (g15, _, _) = gaussian_kernels(1.5);
    for p in color {
        out.push(separable(p, w, h, &g15, &g15));
    }
    // 7..15 oriented intensity edges, sigma 1
    let i1 = derivs(&intensity, w, h, 1.0);
    for a in ORIENTATIONS {
        let e = oriented(&i1, a);
        out.push(positive(&e, GAIN));
        out.push(negative(&e, GAIN));
    }
    // 15..23 opponent-color edges, sigma 1.5
    for p in [&rg, &by] {
        let d = derivs(p, w, h, 1.5);
        for e in [&d.dx, &d.dy] {
            out.push(positive(e, GAIN));
            out.push(negative(e, GAIN));
        }
    }
    // 23..31 second-order intensity structure, sigma 1.5
    let (k0, d1, d2) = gaussian_kernels(1.5);
    let ixx = separable(&intensity, w, h, &d2, &k0);
    let iyy = separable(&intensity, w, h, &k0, &d2);
    let ixy = separable(&intensity, w, h, &d1, &d1);
    let anti: Vec<f64> = ixy.iter().map(|v| -v).collect();
    for e in [&ixx, &iyy, &ixy, &anti] {
        out.push(positive(e, 2.0 * GAIN));
        out.push(negative(e, 2.0 * GAIN));
    }
    // 31..39 oriented intensity edges, sigma 2
    let i2 = derivs(&intensity, w, h, 2.0);
    for a in ORIENTATIONS {
        let e = oriented(&i2, a);
        out.push(positive(&e, GAIN));
        out.push(negative(&e, GAIN));
    }
    // 39..47 center-surround
    let (g1, _, _) = gaussian_kernels(1.0);
    let (g3, _, _) = gaussian_kernels(3.0);
    for p in [&intensity, &rg, &by, &sat] {
        let c = separable(p, w, h, &g1, &g1);
        let s = separable(p, w, h, &g3, &g3);
        let dog: Vec<f64> = c.iter().zip(&s).map(|(a, b)| a - b).collect();
        out.push(positive(&dog, GAIN));
        out.push(negative(&dog, GAIN));
    }
    // 47..50 gradient magnitude of r, g, b (intensity follows the coarse means)
    let mag = |d: &Derivs| -> Vec<f64> { d.dx.iter().zip(&d.dy).map(|(x, y)| GAIN * x.hypot(*y)).collect() };
    for p in [&r, &g, &b] {
        out.push(mag(&derivs(p, w, h, 1.0)));
    }
    // 50..57 color means at a coarse scale
    for p in color {
        out.push(separable(p, w, h, &g3, &g3));
    }
    out.push(mag(&i1));
    // local contrast at two scales
    for sigma in [2.0, 4.0] {
        let (gk, _, _) = gaussian_kernels(sigma);
        let mean = separable(&intensity, w, h, &gk, &gk);
        let sq: Vec<f64> = intensity.iter().map(|v| v * v).collect();
        let mean_sq = separable(&sq, w, h, &gk, &gk);
        out.push(mean_sq.iter().zip(&mean).map(|(m2, m)| 2.0 * GAIN * (m2 - m * m).max(0.0).sqrt()).collect());
    }
    // blob response, sigma 3
    let (k0, _, d2) = gaussian_kernels(3.0);
    let lxx = separable(&intensity, w, h, &d2, &k0);
    let lyy = separable(&intensity, w, h, &k0, &d2);
    let log: Vec<f64> = lxx.iter().zip(&lyy).map(|(a, b)| a + b).collect();
    out.push(positive(&log, 2.0 * GAIN));
    out.push(negative(&log, 2.0 * GAIN));
    // corner and edge strength from the structure tensor
    let (g15, _, _) = gaussian_kernels(1.5);
    let sxx = separable(&i1.dx.iter().map(|v| v * v).collect::<Vec<_>>(), w, h, &g15, &g15);
    let syy = separable(&i1.dy.iter().map(|v| v * v).collect::<Vec<_>>(), w, h, &g15, &g15);
    let sxy = separable(&i1.dx.iter().zip(&i1.dy).map(|(a, b)| a * b).collect::<Vec<_>>(), w, h, &g15, &g15);
    let harris: Vec<f64> = (0..n).map(|i| sxx[i] * syy[i] - sxy[i] * sxy[i] - 0.05 * (sxx[i] + syy[i]).powi(2)).collect();
    out.push(positive(&harris, 40.0));
    out.push(negative(&harris, 40.0));
    debug_assert_eq!(out.len(), STAND_IN_CHANNELS);
    out
}

/// 2x2 mean pooling (odd trailing row/column dropped).
fn pool2(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (ow, oh) = (w / 2, h / 2);
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) / 4.0);
        }
    }
    out
}

/// Deterministic filter-bank features at two receptive-field sizes.
///
/// The fine stack runs the bank on a `2m x 2m` raster and pools to `m x m`;
/// the coarse stack runs it on `m x m`, pools to `m/2` and is resized back
/// to `m x m`, which doubles every effective filter size.
#[derive(Debug, Clone)]
pub struct StandInProvider {
    map_size: usize,
}

impl StandInProvider {
    pub fn new(map_size: usize) -> Self {
        assert!(map_size >= 4 && map_size % 2 == 0, "map size must be even");
        Self { map_size }
    }

    fn stack(&self, planes: Vec<Vec<f64>>, source: FeatureSource) -> Result<DeepFeatureStack> {
        let m = self.map_size;
        // round to single precision so stacks survive the on-disk format unchanged
        let planes = planes.into_iter().map(|p| p.into_iter().map(|v| v as f32 as f64).collect()).collect();
        Ok(DeepFeatureStack { source, maps: FeatureMaps::from_planes(m, m, planes)? })
    }
}

impl FeatureProvider for StandInProvider {
    fn input_size(&self) -> usize {
        2 * self.map_size
    }

    fn channels(&self) -> usize {
        STAND_IN_CHANNELS
    }

    fn provide(&self, roi: &Image, _frame_id: u32) -> Result<(DeepFeatureStack, DeepFeatureStack)> {
        let m = self.map_size;
        let fine = roi.resize_bilinear(2 * m, 2 * m);
        let f4: Vec<Vec<f64>> = filter_bank(&fine).iter().map(|p| pool2(p, 2 * m, 2 * m)).collect();
        let coarse = roi.resize_bilinear(m, m);
        let f5: Vec<Vec<f64>> = filter_bank(&coarse)
            .iter()
            .map(|p| resize_plane(&pool2(p, m, m), m / 2, m / 2, m, m))
            .collect();
        Ok((self.stack(f4, FeatureSource::Conv4Like)?, self.stack(f5, FeatureSource::Conv5Like)?))
    }
}

// ---------------------------------------------------------------------------
// on-disk stacks

const RECORD_MAGIC: &[u8; 4] = b"SDTF";
const RECORD_VERSION: u16 = 1;
const RECORD_HEADER: usize = 4 + 2 + 4 + 1 + 2 + 2 + 2;

/// Appends feature records to a data file and writes the text index.
pub struct FeatureFileWriter {
    data: BufWriter<File>,
    offset: u64,
    index: Vec<(u32, u8, u64)>,
}

impl FeatureFileWriter {
    pub fn create(data_path: &Path) -> Result<Self> {
        Ok(Self { data: BufWriter::new(File::create(data_path)?), offset: 0, index: Vec::new() })
    }

    pub fn write(&mut self, frame: u32, stack: &DeepFeatureStack) -> Result<()> {
        let m = &stack.maps;
        let dims = [m.channels(), m.width(), m.height()];
        if dims.iter().any(|&d| d > u16::MAX as usize) {
            return Err(SdtError::FeatureFile { frame, reason: format!("dimensions {dims:?} exceed u16") });
        }
        let mut buf = Vec::with_capacity(RECORD_HEADER + 4 * m.data().len());
        buf.extend_from_slice(RECORD_MAGIC);
        buf.extend_from_slice(&RECORD_VERSION.to_le_bytes());
        buf.extend_from_slice(&frame.to_le_bytes());
        buf.push(stack.source.tag());
        for d in dims {
            buf.extend_from_slice(&(d as u16).to_le_bytes());
        }
        for &v in m.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.data.write_all(&buf)?;
        self.index.push((frame, stack.source.tag(), self.offset));
        self.offset += buf.len() as u64;
        Ok(())
    }

    /// Flushes the data file and writes `frame source offset` index lines.
    pub fn finish(mut self, index_path: &Path) -> Result<()> {
        self.data.flush()?;
        let mut idx = BufWriter::new(File::create(index_path)?);
        for (frame, tag, off) in &self.index {
            writeln!(idx, "{frame} {tag} {off}")?;
        }
        idx.flush()?;
        Ok(())
    }
}

/// Replays stacks written by [`FeatureFileWriter`]; the ROI image is ignored.
#[derive(Debug)]
pub struct FileProvider {
    data_path: std::path::PathBuf,
    index: BTreeMap<(u32, u8), u64>,
    channels: usize,
    input_size: usize,
}

impl FileProvider {
    pub fn open(data_path: &Path, index_path: &Path, input_size: usize) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (n, line) in BufReader::new(File::open(index_path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parsed = (parts.len() == 3)
                .then(|| Some((parts[0].parse::<u32>().ok()?, parts[1].parse::<u8>().ok()?, parts[2].parse::<u64>().ok()?)))
                .flatten();
            let (frame, tag, off) = parsed.ok_or_else(|| SdtError::FeatureFile {
                frame: 0,
                reason: format!("{}:{}: malformed index line", index_path.display(), n + 1),
            })?;
            index.insert((frame, tag), off);
        }
        let mut p = Self { data_path: data_path.to_path_buf(), index, channels: 0, input_size };
        if let Some(&(frame, tag)) = p.index.keys().next() {
            let source = FeatureSource::from_tag(tag).ok_or_else(|| SdtError::FeatureFile {
                frame,
                reason: format!("unknown source tag {tag}"),
            })?;
            p.channels = p.read(frame, source)?.maps.channels();
        }
        Ok(p)
    }

    pub fn read(&self, frame: u32, source: FeatureSource) -> Result<DeepFeatureStack> {
        let err = |reason: String| SdtError::FeatureFile { frame, reason };
        let off = *self
            .index
            .get(&(frame, source.tag()))
            .ok_or_else(|| err(format!("no {source:?} record")))?;
        let mut f = File::open(&self.data_path)?;
        f.seek(SeekFrom::Start(off))?;
        let mut head = [0u8; RECORD_HEADER];
        f.read_exact(&mut head).map_err(|e| err(format!("truncated header: {e}")))?;
        if &head[..4] != RECORD_MAGIC {
            return Err(err("bad magic".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([head[i], head[i + 1]]) as usize;
        if u16_at(4) != RECORD_VERSION as usize {
            return Err(err(format!("unsupported version {}", u16_at(4))));
        }
        let rec_frame = u32::from_le_bytes(head[6..10].try_into().unwrap());
        if rec_frame != frame || head[10] != source.tag() {
            return Err(err(format!("index points at frame {rec_frame} source {}", head[10])));
        }
        let (c, w, h) = (u16_at(11), u16_at(13), u16_at(15));
        if self.channels != 0 && c != self.channels {
            return Err(err(format!("{c} channels, provider has {}", self.channels)));
        }
        let mut raw = vec![0u8; 4 * c * w * h];
        f.read_exact(&mut raw).map_err(|e| err(format!("truncated data: {e}")))?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        let maps = FeatureMaps::new(c, h, w, data).map_err(|e| err(e.to_string()))?;
        Ok(DeepFeatureStack { source, maps })
    }
}

impl FeatureProvider for FileProvider {
    fn input_size(&self) -> usize {
        self.input_size
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn provide(&self, _roi: &Image, frame_id: u32) -> Result<(DeepFeatureStack, DeepFeatureStack)> {
        let f4 = self.read(frame_id, FeatureSource::Conv4Like)?;
        let f5 = self.read(frame_id, FeatureSource::Conv5Like)?;
        if (f4.maps.width(), f4.maps.height()) != (f5.maps.width(), f5.maps.height()) {
            return Err(SdtError::FeatureFile { frame: frame_id, reason: "stack sizes differ".into() });
        }
        Ok((f4, f5))
    }
}

// ---------------------------------------------------------------------------
// channel saliency

/// Channels ranked by their impact on the selector loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    /// kept channel indices, descending score
    pub indices: Vec<usize>,
    /// score of every input channel
    pub scores: Vec<f64>,
}

/// Zero-padded same-size correlation of one plane with a square kernel.
fn correlate(plane: &[f64], w: usize, h: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let p = (k / 2) as i64;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..k {
                let sy = y as i64 + ky as i64 - p;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for kx in 0..k {
                    let sx = x as i64 + kx as i64 - p;
                    if sx >= 0 && sx < w as i64 {
                        acc += kernel[ky * k + kx] * plane[sy as usize * w + sx as usize];
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Adjoint of [`correlate`].
fn correlate_adjoint(plane: &[f64], w: usize, h: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let p = (k / 2) as i64;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = plane[y * w + x];
            if v == 0.0 {
                continue;
            }
            for ky in 0..k {
                let sy = y as i64 + ky as i64 - p;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for kx in 0..k {
                    let sx = x as i64 + kx as i64 - p;
                    if sx >= 0 && sx < w as i64 {
                        out[sy as usize * w + sx as usize] += kernel[ky * k + kx] * v;
                    }
                }
            }
        }
    }
    out
}

/// Second-order estimate of the loss increase caused by zeroing each channel.
///
/// Per pixel, `-g f + f (H f) / 2` where `g` is the loss gradient with
/// respect to the channel and `H` the Hessian block of that channel. For the
/// linear selector and squared loss `H f = 2 K^T (K * f)` in closed form, so
/// the estimate equals the true change from removing the channel.
pub fn score_feature_saliency(selector: &SelectorNet, stack: &FeatureMaps, target: &HeatMap) -> Result<Vec<f64>> {
    if !selector.is_trained() {
        return Err(SdtError::UntrainedSelector);
    }
    let conv = &selector.conv;
    let cache = conv.forward_cached(stack)?;
    let out = cache.output.channel(0);
    if out.len() != target.values().len() {
        return Err(SdtError::Shape("selector output and target differ in size".into()));
    }
    let (_, g_out) = Loss::Squared.evaluate(out, target.values());
    let g_out = FeatureMaps::new(1, stack.height(), stack.width(), g_out)?;
    let mut scratch = LayerGrads::zeros_like(conv);
    let grad_in = conv.backward(&cache, &g_out, &mut scratch, true).expect("input grad requested");
    let (w, h, k) = (stack.width(), stack.height(), conv.kernel());
    let kk = k * k;
    let scores = (0..stack.channels())
        .map(|c| {
            let f = stack.channel(c);
            let kernel = &conv.weights()[c * kk..(c + 1) * kk];
            let response = correlate(f, w, h, kernel, k);
            let hess_f = correlate_adjoint(&response, w, h, kernel, k);
            let g = grad_in.channel(c);
            (0..w * h).map(|i| -g[i] * f[i] + 0.5 * f[i] * 2.0 * hess_f[i]).sum()
        })
        .collect();
    Ok(scores)
}

/// Keeps the `n` best-scoring channels; ties go to the lower index.
pub fn select_top_features(scores: &[f64], n: usize) -> SelectionMask {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n.min(scores.len()));
    SelectionMask { indices: order, scores: scores.to_vec() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.gen::<f32>()).collect();
        Image::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn stand_in_is_deterministic_and_shaped() {
        let p = StandInProvider::new(46);
        let roi = textured(3, 92, 92);
        let (a4, a5) = p.provide(&roi, 1).unwrap();
        let (b4, b5) = p.provide(&roi, 7).unwrap();
        assert_eq!(a4, b4);
        assert_eq!(a5, b5);
        for s in [&a4, &a5] {
            assert_eq!((s.maps.channels(), s.maps.width(), s.maps.height()), (64, 46, 46));
            assert!(s.maps.data().iter().all(|v| v.is_finite()));
        }
        assert_eq!(a4.source, FeatureSource::Conv4Like);
        assert_eq!(a5.source, FeatureSource::Conv5Like);
    }

    #[test]
    fn constant_roi_silences_band_pass_channels() {
        let p = StandInProvider::new(46);
        let roi = Image::from_fn(92, 92, 3, |_, _, c| [0.7, 0.3, 0.2][c]);
        let (f4, f5) = p.provide(&roi, 1).unwrap();
        for s in [&f4, &f5] {
            for c in (0..STAND_IN_CHANNELS).filter(|c| !STAND_IN_LOWPASS.contains(c)) {
                let m = s.maps.channel(c).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!(m < 1e-6, "channel {c} = {m}");
            }
            // the color means do carry the constant
            assert!((s.maps.channel(0)[100] - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = std::env::temp_dir().join(format!("sdt-feat-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let (data, index) = (dir.join("f.bin"), dir.join("f.idx"));
        let p = StandInProvider::new(46);
        let mut w = FeatureFileWriter::create(&data).unwrap();
        let mut expected = Vec::new();
        for frame in 1..=3u32 {
            let (f4, f5) = p.provide(&textured(frame as u64, 92, 92), frame).unwrap();
            w.write(frame, &f4).unwrap();
            w.write(frame, &f5).unwrap();
            expected.push((f4, f5));
        }
        w.finish(&index).unwrap();
        let fp = FileProvider::open(&data, &index, 92).unwrap();
        assert_eq!(fp.channels(), 64);
        let dummy = Image::from_fn(4, 4, 3, |_, _, _| 0.0);
        for (i, (f4, f5)) in expected.iter().enumerate() {
            let (r4, r5) = fp.provide(&dummy, i as u32 + 1).unwrap();
            assert_eq!(&r4, f4);
            assert_eq!(&r5, f5);
        }
        match fp.provide(&dummy, 9) {
            Err(SdtError::FeatureFile { frame: 9, .. }) => {}
            other => panic!("{other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn top_features_examples() {
        assert_eq!(select_top_features(&[3.0, 1.0, 2.0], 2).indices, vec![0, 2]);
        assert_eq!(select_top_features(&[3.0, 1.0, 2.0], 10).indices, vec![0, 2, 1]);
        assert_eq!(select_top_features(&[1.0, 2.0, 2.0, 0.0], 2).indices, vec![1, 2]);
    }

    proptest! {
        #[test]
        fn top_features_match_sort_oracle(scores in prop::collection::vec(-5i32..5, 1..40), n in 0usize..50) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let mut pairs: Vec<(f64, usize)> = s.iter().copied().zip(0..).collect();
            // stable sort on descending score keeps lower indices first
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let oracle: Vec<usize> = pairs.iter().take(n).map(|p| p.1).collect();
            prop_assert_eq!(select_top_features(&s, n).indices, oracle);
        }

        #[test]
        fn selection_is_permutation_equivariant(scores in prop::collection::vec(-1e3f64..1e3, 2..30), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..scores.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let n = scores.len() / 2;
            let a: std::collections::BTreeSet<usize> = select_top_features(&scores, n).indices.into_iter().collect();
            let b: std::collections::BTreeSet<usize> = select_top_features(&permuted, n).indices.into_iter().map(|i| perm[i]).collect();
            // distinct random floats, so no ties can reorder the sets
            prop_assert_eq!(a, b);
        }
    }

    fn random_stack(rng: &mut ChaCha8Rng, c: usize, n: usize) -> FeatureMaps {
        FeatureMaps::new(c, n, n, (0..c * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn trained_selector(rng: &mut ChaCha8Rng, c: usize) -> SelectorNet {
        let mut sel = SelectorNet::new(c, 3, 0.3, 0.3, rng.gen()).unwrap();
        sel.set_training(false);
        sel.mark_trained();
        sel.conv.bias_mut()[0] = rng.gen_range(-0.5..0.5);
        sel
    }

    fn loss(sel: &SelectorNet, x: &FeatureMaps, t: &HeatMap) -> f64 {
        Loss::Squared.evaluate(sel.forward_eval(x).unwrap().values(), t.values()).0
    }

    #[test]
    fn scores_equal_exact_zeroing_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10;
        let x = random_stack(&mut rng, 5, n);
        let t = HeatMap::from_fn(n, n, |a, b| ((a * b) % 7) as f64 / 7.0);
        let sel = trained_selector(&mut rng, 5);
        let scores = score_feature_saliency(&sel, &x, &t).unwrap();
        let base = loss(&sel, &x, &t);
        for c in 0..5 {
            let mut z = x.clone();
            z.channel_mut(c).iter_mut().for_each(|v| *v = 0.0);
            let exact = loss(&sel, &z, &t) - base;
            assert!((scores[c] - exact).abs() < 1e-9, "{c}: {} vs {exact}", scores[c]);
        }
    }

    #[test]
    fn zero_and_duplicate_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 8;
        let mut x = random_stack(&mut rng, 4, n);
        x.channel_mut(0).iter_mut().for_each(|v| *v = 0.0);
        let dup = x.channel(1).to_vec();
        x.channel_mut(2).copy_from_slice(&dup);
        let mut sel = trained_selector(&mut rng, 4);
        let w1: Vec<f64> = sel.conv.weights()[9..18].to_vec();
        sel.conv.weights_mut()[18..27].copy_from_slice(&w1);
        let t = HeatMap::from_fn(n, n, |a, _| a as f64 / n as f64);
        let s = score_feature_saliency(&sel, &x, &t).unwrap();
        assert_eq!(s[0], 0.0);
        assert!((s[1] - s[2]).abs() < 1e-12);
    }

    #[test]
    fn untrained_selector_is_rejected() {
        let sel = SelectorNet::new(2, 3, 0.3, 0.01, 1).unwrap();
        let x = FeatureMaps::zeros(2, 4, 4);
        assert!(matches!(score_feature_saliency(&sel, &x, &HeatMap::zeros(4, 4)), Err(SdtError::UntrainedSelector)));
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (w, h) = (7, 5);
        let a: Vec<f64> = (0..w * h).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..w * h).map(|_| rng.gen()).collect();
        let k: Vec<f64> = (0..9).map(|_| rng.gen()).collect();
        let lhs: f64 = correlate(&a, w, h, &k, 3).iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(correlate_adjoint(&b, w, h, &k, 3)).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
