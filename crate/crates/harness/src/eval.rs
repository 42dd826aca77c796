//! Overlap, center error, success and precision scores.

use crate::error::{HarnessError, Result};
use crate::run::{Ablation, Trace};
use sdt_core::tracker::FrameRecord;
use sdt_core::{center_error, iou, BoundingBox, TrackerConfig};
use serde::{Deserialize, Serialize};

/// A frame counts as a success when its IoU exceeds this.
pub const SUCCESS_IOU: f64 = 0.5;
/// A frame counts as precise when its center error is at most this.
pub const PRECISION_PX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: usize,
    pub iou: f64,
    pub center_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// mean IoU
    pub overlap_rate: f64,
    /// mean center distance in pixels
    pub center_error: f64,
    pub success: f64,
    pub precision: f64,
    pub frames: Vec<FrameScore>,
}

impl Scores {
    /// Mean IoU over 1-based frames `from..=to`.
    pub fn mean_iou(&self, from: usize, to: usize) -> f64 {
        let sel: Vec<f64> = self.frames.iter().filter(|f| f.frame >= from && f.frame <= to).map(|f| f.iou).collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequence: String,
    pub ablation: Ablation,
    pub update_events: usize,
    pub scores: Scores,
    pub config: TrackerConfig,
}

impl EvalReport {
    pub fn new(trace: &Trace, scores: Scores, cfg: &TrackerConfig) -> Self {
        Self {
            sequence: trace.sequence.clone(),
            ablation: trace.ablation,
            update_events: trace.update_events(),
            scores,
            config: cfg.clone(),
        }
    }
}

/// Scores a trace against per-frame ground truth.
pub fn evaluate(records: &[FrameRecord], gt: &[BoundingBox]) -> Result<Scores> {
    if records.len() != gt.len() {
        return Err(HarnessError::Validation(format!(
            "trace has {} frames but the ground truth has {}",
            records.len(),
            gt.len()
        )));
    }
    if records.is_empty() {
        return Err(HarnessError::Validation("empty trace".into()));
    }
    let frames: Vec<FrameScore> = records
        .iter()
        .zip(gt)
        .map(|(r, g)| {
            let b = r.estimate();
            FrameScore { frame: r.frame, iou: iou(&b, g), center_error: center_error(&b, g) }
        })
        .collect();
    let n = frames.len() as f64;
    Ok(Scores {
        overlap_rate: frames.iter().map(|f| f.iou).sum::<f64>() / n,
        center_error: frames.iter().map(|f| f.center_error).sum::<f64>() / n,
        success: frames.iter().filter(|f| f.iou > SUCCESS_IOU).count() as f64 / n,
        precision: frames.iter().filter(|f| f.center_error <= PRECISION_PX).count() as f64 / n,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(frame: usize, b: &BoundingBox) -> FrameRecord {
        FrameRecord {
            frame,
            bbox: b.to_top_left(),
            scale: 1.0,
            confidence: 1.0,
            used_prior: false,
            roi_confidence: 0.0,
            holistic_peaks: 1,
            valid_parts: 0,
            rectified: false,
            frozen: false,
            update_fired: false,
            update: None,
            error: None,
        }
    }

    fn boxes(n: usize) -> Vec<BoundingBox> {
        (0..n).map(|i| BoundingBox::new(100.0 + 3.0 * i as f64, 120.0, 100.0, 100.0)).collect()
    }

    /// Pixel-count IoU of axis-aligned integer boxes.
    fn raster_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
        let inside = |bx: &BoundingBox, x: f64, y: f64| x >= bx.left() && x < bx.right() && y >= bx.top() && y < bx.bottom();
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..400 {
            for x in 0..400 {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let (ia, ib) = (inside(a, fx, fy), inside(b, fx, fy));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn perfect_trace_is_the_fixed_point() {
        let gt = boxes(5);
        let recs: Vec<_> = gt.iter().enumerate().map(|(i, b)| record(i + 1, b)).collect();
        let s = evaluate(&recs, &gt).unwrap();
        assert_eq!((s.overlap_rate, s.center_error, s.success, s.precision), (1.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn shift_of_25_px_fails_precision_but_passes_success() {
        let gt = boxes(4);
        let recs: Vec<_> = gt
            .iter()
            .enumerate()
            .map(|(i, b)| record(i + 1, &BoundingBox::new(b.cx + 25.0, b.cy, b.w, b.h)))
            .collect();
        let s = evaluate(&recs, &gt).unwrap();
        assert_eq!(s.precision, 0.0);
        assert_eq!(s.success, 1.0);
        let expect = raster_iou(&recs[0].estimate(), &gt[0]);
        assert!((expect - 0.6).abs() < 1e-12);
        assert!((s.frames[0].iou - expect).abs() < 1e-12);
    }

    #[test]
    fn half_disjoint_gives_half_success() {
        let gt = boxes(6);
        let recs: Vec<_> = gt
            .iter()
            .enumerate()
            .map(|(i, b)| if i % 2 == 0 { record(i + 1, b) } else { record(i + 1, &BoundingBox::new(b.cx + 150.0, b.cy, b.w, b.h)) })
            .collect();
        assert_eq!(evaluate(&recs, &gt).unwrap().success, 0.5);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let gt = boxes(3);
        assert!(evaluate(&[record(1, &gt[0])], &gt).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let gt = boxes(3);
        let recs: Vec<_> = gt.iter().enumerate().map(|(i, b)| record(i + 1, &BoundingBox::new(b.cx + 0.1 * i as f64, b.cy, b.w, b.h))).collect();
        let trace = Trace { sequence: "s".into(), ablation: Ablation::NoPrior, records: recs.clone() };
        let report = EvalReport::new(&trace, evaluate(&recs, &gt).unwrap(), &TrackerConfig::default());
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        assert_eq!(back, report);
    }
}
