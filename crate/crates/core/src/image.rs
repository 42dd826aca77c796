//! Raster primitives: frames, heat maps and bilinear resampling.
//!
//! Continuous coordinates follow one convention everywhere: origin at the
//! top-left corner, x to the right, y downward, and pixel `i` covering
//! `[i, i + 1)` with its center at `i + 0.5`.

use crate::error::{Result, SdtError};
use serde::{Deserialize, Serialize};

/// Row-major, interleaved image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(SdtError::InvalidImage(format!("empty raster {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(SdtError::InvalidImage(format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(SdtError::InvalidImage(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SdtError::InvalidImage(format!("value {v} outside [0,1]")));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Builds an image from a per-pixel closure; values are clamped to `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        assert!(width > 0 && height > 0 && (channels == 1 || channels == 3));
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self { width, height, channels, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_color(&self) -> bool {
        self.channels == 3
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// One channel as a planar `f64` raster.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        assert!(c < self.channels);
        self.data.iter().skip(c).step_by(self.channels).map(|&v| v as f64).collect()
    }

    /// Mean over channels as a planar raster.
    pub fn intensity(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / self.channels as f64)
            .collect()
    }

    /// Returns a 3-channel copy (gray replicated).
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image { width: self.width, height: self.height, channels: 3, data }
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        self.crop_resized(0.0, 0.0, self.width as f64, self.height as f64, width, height)
    }

    /// Samples the window `[x0, x0 + w) x [y0, y0 + h)` onto a `out_w x out_h`
    /// raster. Samples falling outside the frame replicate the border.
    pub fn crop_resized(&self, x0: f64, y0: f64, w: f64, h: f64, out_w: usize, out_h: usize) -> Image {
        assert!(out_w > 0 && out_h > 0 && w > 0.0 && h > 0.0);
        let planes: Vec<Vec<f64>> = (0..self.channels).map(|c| self.plane(c)).collect();
        let sx = w / out_w as f64;
        let sy = h / out_h as f64;
        let mut data = Vec::with_capacity(out_w * out_h * self.channels);
        for j in 0..out_h {
            let fy = y0 + (j as f64 + 0.5) * sy - 0.5;
            for i in 0..out_w {
                let fx = x0 + (i as f64 + 0.5) * sx - 0.5;
                for p in &planes {
                    let v = sample_bilinear(p, self.width, self.height, fx, fy);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        Image { width: out_w, height: out_h, channels: self.channels, data }
    }
}

/// Bilinear sample at index-space coordinates (pixel centers on integers),
/// clamping to the border.
#[inline]
pub fn sample_bilinear(plane: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let ax = x - x0 as f64;
    let ay = y - y0 as f64;
    let top = plane[y0 * width + x0] * (1.0 - ax) + plane[y0 * width + x1] * ax;
    let bottom = plane[y1 * width + x0] * (1.0 - ax) + plane[y1 * width + x1] * ax;
    top * (1.0 - ay) + bottom * ay
}

/// Half-pixel-center bilinear resize of a planar raster.
pub fn resize_plane(plane: &[f64], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    assert_eq!(plane.len(), width * height);
    assert!(out_w > 0 && out_h > 0);
    if out_w == width && out_h == height {
        return plane.to_vec();
    }
    let sx = width as f64 / out_w as f64;
    let sy = height as f64 / out_h as f64;
    let mut out = Vec::with_capacity(out_w * out_h);
    for j in 0..out_h {
        let fy = (j as f64 + 0.5) * sy - 0.5;
        for i in 0..out_w {
            let fx = (i as f64 + 0.5) * sx - 0.5;
            out.push(sample_bilinear(plane, width, height, fx, fy));
        }
    }
    out
}

/// Single-channel confidence surface, stored in double precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl HeatMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(SdtError::Shape(format!(
                "heat map {width}x{height} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SdtError::Shape("non-finite heat value".into()));
        }
        Ok(Self { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0.0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn scaled(&self, k: f64) -> HeatMap {
        HeatMap { width: self.width, height: self.height, values: self.values.iter().map(|v| v * k).collect() }
    }

    /// Negative values set to zero.
    pub fn clamped_nonnegative(&self) -> HeatMap {
        HeatMap { width: self.width, height: self.height, values: self.values.iter().map(|v| v.max(0.0)).collect() }
    }

    /// Divides by the maximum; maps with no positive value become all-zero.
    pub fn normalized_max(&self) -> HeatMap {
        let m = self.max();
        let values = if m > 0.0 {
            self.values.iter().map(|v| (v / m).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        HeatMap { width: self.width, height: self.height, values }
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> HeatMap {
        HeatMap { width, height, values: resize_plane(&self.values, self.width, self.height, width, height) }
    }

    /// Normalized cross-correlation with another map of the same shape.
    pub fn ncc(&self, other: &HeatMap) -> f64 {
        assert_eq!(self.values.len(), other.values.len());
        let n = self.values.len() as f64;
        let ma = self.sum() / n;
        let mb = other.sum() / n;
        let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
        for (a, b) in self.values.iter().zip(&other.values) {
            num += (a - ma) * (b - mb);
            da += (a - ma) * (a - ma);
            db += (b - mb) * (b - mb);
        }
        if da <= 0.0 || db <= 0.0 {
            0.0
        } else {
            num / (da * db).sqrt()
        }
    }
}
