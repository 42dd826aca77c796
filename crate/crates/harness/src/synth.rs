//! Scripted synthetic sequences with exact ground truth.
//!
//! A target with four differently colored quadrants moves over a smooth
//! random background. Optional extras: a sudden jump, an identical
//! distracter on its own path, and gradual hue and scale drift.

use crate::dataset::SequenceDataset;
use crate::error::{HarnessError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sdt_core::{BoundingBox, Image};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Appearance {
    pub width: f64,
    pub height: f64,
    /// RGB of the TL, TR, BL, BR quadrants
    pub colors: [[f32; 3]; 4],
    /// amplitude of the diagonal shading inside each quadrant
    pub shading: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Teleport {
    /// 1-based frame at which the target appears at its new place
    pub frame: usize,
    pub offset: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Distracter {
    pub start: [f64; 2],
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Drift {
    pub hue_degrees_per_frame: f64,
    /// linear growth of the size multiplier per frame
    pub scale_per_frame: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub target: Appearance,
    pub start: [f64; 2],
    pub velocity: [f64; 2],
    /// amplitude and period (frames) of a vertical sway added to the path
    #[serde(default)]
    pub sway: [f64; 2],
    #[serde(default)]
    pub teleport: Option<Teleport>,
    #[serde(default)]
    pub distracter: Option<Distracter>,
    #[serde(default)]
    pub drift: Option<Drift>,
    /// contrast of the smooth background pattern
    pub background: f32,
    /// standard deviation of per-pixel Gaussian noise
    pub noise: f32,
    #[serde(default)]
    pub grayscale: bool,
    pub seed: u64,
}

const DEFAULT_COLORS: [[f32; 3]; 4] = [[0.85, 0.15, 0.1], [0.95, 0.8, 0.1], [0.1, 0.25, 0.85], [0.15, 0.7, 0.25]];

impl SyntheticSpec {
    fn base(name: &str, frames: usize, seed: u64) -> Self {
        Self {
            name: name.into(),
            width: 320,
            height: 240,
            frames,
            target: Appearance { width: 36.0, height: 30.0, colors: DEFAULT_COLORS, shading: 0.15 },
            start: [100.0, 120.0],
            velocity: [0.0, 0.0],
            sway: [0.0, 0.0],
            teleport: None,
            distracter: None,
            drift: None,
            background: 0.12,
            noise: 0.02,
            grayscale: false,
            seed,
        }
    }

    /// A still target.
    pub fn still(frames: usize, seed: u64) -> Self {
        Self::base("still", frames, seed)
    }

    /// 60 frames; the target jumps 120 px to the right at frame 30.
    pub fn teleport(seed: u64) -> Self {
        Self {
            velocity: [0.5, 0.0],
            teleport: Some(Teleport { frame: 30, offset: [120.0, 0.0] }),
            ..Self::base("teleport", 60, seed)
        }
    }

    /// 80 frames; an identical copy passes 30 px below the target, edge to edge.
    pub fn distracter(seed: u64) -> Self {
        Self {
            target: Appearance { width: 30.0, height: 30.0, colors: DEFAULT_COLORS, shading: 0.15 },
            start: [80.0, 100.0],
            velocity: [1.5, 0.0],
            distracter: Some(Distracter { start: [239.0, 130.0], velocity: [-1.5, 0.0] }),
            ..Self::base("distracter", 80, seed)
        }
    }

    /// 80 frames of steady hue rotation and growth while swaying.
    pub fn drift(seed: u64) -> Self {
        Self {
            start: [110.0, 120.0],
            velocity: [1.0, 0.0],
            sway: [20.0, 40.0],
            drift: Some(Drift { hue_degrees_per_frame: 1.5, scale_per_frame: 0.005 }),
            ..Self::base("drift", 80, seed)
        }
    }

    /// Scale multiplier at 1-based frame `t`.
    pub fn scale_at(&self, t: usize) -> f64 {
        1.0 + self.drift.map_or(0.0, |d| d.scale_per_frame) * (t - 1) as f64
    }

    fn hue_at(&self, t: usize) -> f64 {
        self.drift.map_or(0.0, |d| d.hue_degrees_per_frame) * (t - 1) as f64
    }

    /// Ground-truth box at 1-based frame `t`.
    pub fn target_box(&self, t: usize) -> BoundingBox {
        let k = (t - 1) as f64;
        let mut cx = self.start[0] + self.velocity[0] * k;
        let mut cy = self.start[1] + self.velocity[1] * k;
        if self.sway[1] > 0.0 {
            cy += self.sway[0] * (2.0 * PI * k / self.sway[1]).sin();
        }
        if let Some(tp) = self.teleport {
            if t >= tp.frame {
                cx += tp.offset[0];
                cy += tp.offset[1];
            }
        }
        let s = self.scale_at(t);
        BoundingBox { cx, cy, w: self.target.width * s, h: self.target.height * s, scale: s }
    }

    pub fn distracter_box(&self, t: usize) -> Option<BoundingBox> {
        self.distracter.map(|d| {
            let k = (t - 1) as f64;
            let s = self.scale_at(t);
            BoundingBox {
                cx: d.start[0] + d.velocity[0] * k,
                cy: d.start[1] + d.velocity[1] * k,
                w: self.target.width * s,
                h: self.target.height * s,
                scale: s,
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Validation(format!("synthetic spec {:?}: {m}", self.name)));
        if self.frames < 2 {
            return bad("needs at least 2 frames".into());
        }
        if self.width < 16 || self.height < 16 {
            return bad("canvas too small".into());
        }
        if !(self.target.width > 0.0 && self.target.height > 0.0) {
            return bad("target size must be positive".into());
        }
        if !(self.noise >= 0.0 && self.background >= 0.0) {
            return bad("noise and background contrast must be non-negative".into());
        }
        if let Some(tp) = self.teleport {
            if tp.frame < 2 || tp.frame > self.frames {
                return bad(format!("teleport frame {} outside 2..={}", tp.frame, self.frames));
            }
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for t in 1..=self.frames {
            if self.scale_at(t) <= 0.0 {
                return bad(format!("non-positive scale at frame {t}"));
            }
            for (what, b) in [("target", Some(self.target_box(t))), ("distracter", self.distracter_box(t))] {
                let Some(b) = b else { continue };
                if b.left() < 0.0 || b.top() < 0.0 || b.right() > w || b.bottom() > h {
                    return bad(format!("{what} leaves the canvas at frame {t}"));
                }
            }
        }
        Ok(())
    }
}

/// Rotates an RGB color about the gray axis.
fn rotate_hue(c: [f32; 3], degrees: f64) -> [f32; 3] {
    if degrees == 0.0 {
        return c;
    }
    let (s, co) = degrees.to_radians().sin_cos();
    let k = 1.0 / 3.0;
    let r3 = (1.0f64 / 3.0).sqrt();
    let a = co + (1.0 - co) * k;
    let b = k * (1.0 - co) - r3 * s;
    let d = k * (1.0 - co) + r3 * s;
    let m = [[a, b, d], [d, a, b], [b, d, a]];
    let v = [c[0] as f64, c[1] as f64, c[2] as f64];
    let mut out = [0.0f32; 3];
    for i in 0..3 {
        out[i] = (m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2]).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Smooth background: a tinted gray plus a few random low-frequency waves.
fn background(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..6)
        .map(|_| {
            let angle = rng.gen_range(0.0..PI);
            let freq = rng.gen_range(1.0..4.0) * 2.0 * PI / spec.width as f64;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let tint = [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)];
            (angle, freq, phase, tint)
        })
        .collect();
    let base = [0.45, 0.5, 0.5];
    let amp = spec.background as f64 / waves.len() as f64 * 2.0;
    let mut out = Vec::with_capacity(spec.width * spec.height * 3);
    for y in 0..spec.height {
        for x in 0..spec.width {
            for c in 0..3 {
                let mut v = base[c];
                for (angle, freq, phase, tint) in &waves {
                    let u = x as f64 * angle.cos() + y as f64 * angle.sin();
                    v += amp * tint[c] * (freq * u + phase).sin();
                }
                out.push(v as f32);
            }
        }
    }
    out
}

fn paint(canvas: &mut [f32], width: usize, height: usize, b: &BoundingBox, look: &Appearance, hue: f64) {
    let colors = look.colors.map(|c| rotate_hue(c, hue));
    let x0 = b.left().floor().max(0.0) as usize;
    let x1 = (b.right().ceil() as usize).min(width);
    let y0 = b.top().floor().max(0.0) as usize;
    let y1 = (b.bottom().ceil() as usize).min(height);
    for y in y0..y1 {
        for x in x0..x1 {
            // pixel centers decide membership
            let u = (x as f64 + 0.5 - b.left()) / b.w;
            let v = (y as f64 + 0.5 - b.top()) / b.h;
            if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
                continue;
            }
            let q = (u >= 0.5) as usize + 2 * (v >= 0.5) as usize;
            let shade = 1.0 - look.shading * (0.5 + 0.5 * (2.0 * PI * (2.0 * u + v)).cos()) as f32;
            let i = (y * width + x) * 3;
            for c in 0..3 {
                canvas[i + c] = colors[q][c] * shade;
            }
        }
    }
}

/// Renders the sequence. Identical specs give bitwise-identical frames.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SequenceDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg = background(spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise.max(0.0) as f64).expect("finite std");
    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt = Vec::with_capacity(spec.frames);
    for t in 1..=spec.frames {
        let mut canvas = bg.clone();
        let hue = spec.hue_at(t);
        if let Some(d) = spec.distracter_box(t) {
            paint(&mut canvas, spec.width, spec.height, &d, &spec.target, hue);
        }
        let b = spec.target_box(t);
        paint(&mut canvas, spec.width, spec.height, &b, &spec.target, hue);
        if spec.noise > 0.0 {
            for v in canvas.iter_mut() {
                *v += noise.sample(&mut rng) as f32;
            }
        }
        for v in canvas.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        let img = Image::new(spec.width, spec.height, 3, canvas)?;
        frames.push(if spec.grayscale {
            let i = img.intensity().into_iter().map(|v| v as f32).collect();
            Image::new(spec.width, spec.height, 1, i)?
        } else {
            img
        });
        gt.push(b);
    }
    SequenceDataset::from_images(spec.name.clone(), frames, gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn still_target_has_constant_truth() {
        let ds = synthesize(&SyntheticSpec::still(10, 1)).unwrap();
        assert_eq!(ds.len(), 10);
        assert!(ds.ground_truth.iter().all(|b| *b == ds.ground_truth[0]));
    }

    #[test]
    fn teleport_jumps_exactly_at_its_frame() {
        let spec = SyntheticSpec::teleport(1);
        let before = spec.target_box(29);
        let at = spec.target_box(30);
        assert!((at.cx - before.cx - 120.5).abs() < 1e-12);
        assert_eq!(at.cy, before.cy);
        let ds = synthesize(&spec).unwrap();
        assert_eq!(ds.ground_truth[29], at);
    }

    #[test]
    fn same_seed_same_frames() {
        let spec = SyntheticSpec::distracter(4);
        let a = synthesize(&spec).unwrap();
        let b = synthesize(&spec).unwrap();
        for i in [0, 40, 79] {
            assert_eq!(a.frame(i).unwrap().data(), b.frame(i).unwrap().data());
        }
        let c = synthesize(&SyntheticSpec { seed: 5, ..spec }).unwrap();
        assert_ne!(a.frame(0).unwrap().data(), c.frame(0).unwrap().data());
    }

    #[test]
    fn distracter_passes_within_forty_pixels() {
        let spec = SyntheticSpec::distracter(1);
        let closest = (1..=spec.frames)
            .map(|t| sdt_core::center_error(&spec.target_box(t), &spec.distracter_box(t).unwrap()))
            .fold(f64::MAX, f64::min);
        assert!(closest <= 40.0 + 1e-9, "{closest}");
    }

    #[test]
    fn leaving_the_canvas_is_rejected() {
        let spec = SyntheticSpec { velocity: [5.0, 0.0], ..SyntheticSpec::still(80, 1) };
        assert!(synthesize(&spec).is_err());
    }

    #[test]
    fn hue_rotation_keeps_gray_and_cycles() {
        assert_eq!(rotate_hue([0.5, 0.5, 0.5], 77.0), [0.5, 0.5, 0.5]);
        let c = rotate_hue([0.9, 0.1, 0.1], 120.0);
        assert!(c[1] > c[0] && c[1] > c[2], "{c:?}");
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = SyntheticSpec::drift(3);
        let back: SyntheticSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
