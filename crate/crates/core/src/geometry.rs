//! Boxes, overlap metrics, ROI transforms and Gaussian target maps.

use crate::error::{Result, SdtError};
use crate::image::HeatMap;
use serde::{Deserialize, Serialize};

/// Axis-aligned target region in continuous frame coordinates.
///
/// `scale` is the multiplier relative to the first-frame box, so that
/// `(w, h) = scale * (w1, h1)` holds for boxes produced by the tracker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub scale: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h, scale: 1.0 }
    }

    /// Converts a top-left `x,y,w,h` rectangle.
    pub fn from_top_left(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    /// Box of `scale` times the reference size, centered at `(cx, cy)`.
    pub fn scaled_from(cx: f64, cy: f64, base_w: f64, base_h: f64, scale: f64) -> Self {
        Self { cx, cy, w: base_w * scale, h: base_h * scale, scale }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.cx, self.cy, self.w, self.h, self.scale].iter().all(|v| v.is_finite())
            && self.w > 0.0
            && self.h > 0.0
            && self.scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SdtError::InvalidBox(format!("{self:?}")))
        }
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Top-left `x,y,w,h` tuple.
    pub fn to_top_left(&self) -> [f64; 4] {
        [self.left(), self.top(), self.w, self.h]
    }

    /// The four equal quadrants, ordered TL, TR, BL, BR.
    pub fn quadrants(&self) -> [BoundingBox; 4] {
        let (qw, qh) = (self.w / 2.0, self.h / 2.0);
        let (dx, dy) = (self.w / 4.0, self.h / 4.0);
        let q = |sx: f64, sy: f64| BoundingBox {
            cx: self.cx + sx * dx,
            cy: self.cy + sy * dy,
            w: qw,
            h: qh,
            scale: self.scale,
        };
        [q(-1.0, -1.0), q(1.0, -1.0), q(-1.0, 1.0), q(1.0, 1.0)]
    }
}

/// Intersection over union; zero-area unions yield 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Euclidean distance between box centers.
pub fn center_error(a: &BoundingBox, b: &BoundingBox) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

/// Maps a square search window in the frame onto a `size x size` raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiTransform {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub size: usize,
}

impl RoiTransform {
    pub fn centered(cx: f64, cy: f64, side: f64, size: usize) -> Self {
        Self { x0: cx - side / 2.0, y0: cy - side / 2.0, side, size }
    }

    /// Raster pixels per frame pixel.
    pub fn ratio(&self) -> f64 {
        self.size as f64 / self.side
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x0 + self.side / 2.0, self.y0 + self.side / 2.0)
    }

    pub fn to_map(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) * self.ratio(), (y - self.y0) * self.ratio())
    }

    pub fn to_frame(&self, mx: f64, my: f64) -> (f64, f64) {
        (self.x0 + mx / self.ratio(), self.y0 + my / self.ratio())
    }

    pub fn box_to_map(&self, b: &BoundingBox) -> BoundingBox {
        let (cx, cy) = self.to_map(b.cx, b.cy);
        BoundingBox { cx, cy, w: b.w * self.ratio(), h: b.h * self.ratio(), scale: b.scale }
    }
}

/// Peak-normalized Gaussian centered on `b` (given in map coordinates),
/// with standard deviations `sigma_factor * (w, h)`.
pub fn gaussian_map(b: &BoundingBox, width: usize, height: usize, sigma_factor: f64) -> Result<HeatMap> {
    b.validate()?;
    if !(b.cx >= 0.0 && b.cx < width as f64 && b.cy >= 0.0 && b.cy < height as f64) {
        return Err(SdtError::Coordinates(format!(
            "gaussian center ({:.2},{:.2}) outside {width}x{height} map",
            b.cx, b.cy
        )));
    }
    let sx = sigma_factor * b.w;
    let sy = sigma_factor * b.h;
    Ok(HeatMap::from_fn(width, height, |x, y| {
        let dx = x as f64 + 0.5 - b.cx;
        let dy = y as f64 + 0.5 - b.cy;
        (-(dx * dx) / (2.0 * sx * sx) - (dy * dy) / (2.0 * sy * sy)).exp()
    }))
}
