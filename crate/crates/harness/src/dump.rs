//! PNG dumps of heat maps and the prior-map stage, for inspection.

use crate::dataset::{save_png, SequenceDataset};
use crate::error::{HarnessError, Result};
use sdt_core::prior::{
    align_candidates, build_saliency_map, crop_window, decide_roi, extract_candidates, learn_prior_weights, FrameGrid, RoiDecision,
    SaliencyMap, ShallowExtractor,
};
use sdt_core::tracker::FrameMaps;
use sdt_core::{BoundingBox, HeatMap, Image, TrackerConfig};
use serde::Serialize;
use std::fs;
use std::path::Path;

/// Gray image of `map / max(map)`, negatives drawn as black.
pub fn heatmap_image(map: &HeatMap) -> Image {
    let max = map.max();
    let k = if max > 0.0 { 1.0 / max } else { 0.0 };
    Image::from_fn(map.width(), map.height(), 1, |x, y, _| (map.get(x, y).max(0.0) * k) as f32)
}

pub fn save_heatmap(map: &HeatMap, path: &Path) -> Result<()> {
    save_png(&heatmap_image(map), path)
}

/// Writes `NNNN_<name>.png` for every map of one frame.
pub fn dump_frame_maps(maps: &FrameMaps, frame: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let file = |name: &str| dir.join(format!("{frame:04}_{name}.png"));
    save_heatmap(&maps.holistic, &file("holistic"))?;
    save_heatmap(&maps.rectified, &file("rectified"))?;
    for (i, p) in maps.parts.iter().enumerate() {
        save_heatmap(p, &file(&format!("part{}", i + 1)))?;
    }
    if let Some(s) = &maps.saliency {
        save_heatmap(&s.penalized, &file("saliency"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateSummary {
    pub area: usize,
    pub centroid: (f64, f64),
    pub score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PriorReport {
    pub frame: usize,
    pub previous_box: [f64; 4],
    pub min_area_grid: f64,
    pub candidates: Vec<CandidateSummary>,
    pub decision: RoiDecision,
}

fn draw_rect(img: &mut [f32], w: usize, h: usize, b: &BoundingBox, rgb: [f32; 3]) {
    let (x0, y0) = (b.left().max(0.0) as usize, b.top().max(0.0) as usize);
    let x1 = (b.right().max(0.0) as usize).min(w.saturating_sub(1));
    let y1 = (b.bottom().max(0.0) as usize).min(h.saturating_sub(1));
    if x0 > x1 || y0 > y1 {
        return;
    }
    let mut put = |x: usize, y: usize| {
        for c in 0..3 {
            img[(y * w + x) * 3 + c] = rgb[c];
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

fn binary_image(smap: &SaliencyMap) -> Image {
    let n = smap.size();
    Image::from_fn(n, n, 1, |x, y, _| smap.binary[y * n + x] as u8 as f32)
}

/// Runs the prior stage on frame `k` (1-based, `k >= 2`) with weights and
/// template fitted on frame 1 and the ground-truth box of frame `k - 1` as
/// the previous estimate, then writes the maps, an overlay and a JSON report.
pub fn prior_debug(ds: &SequenceDataset, k: usize, cfg: &TrackerConfig, out: &Path) -> Result<PriorReport> {
    if k < 2 || k > ds.len() {
        return Err(HarnessError::Validation(format!("frame {k} is outside 2..={}", ds.len())));
    }
    if ds.ground_truth.len() < k - 1 {
        return Err(HarnessError::Validation(format!("frame {k} needs ground truth up to frame {}", k - 1)));
    }
    let first = ds.frame(0)?;
    let gt = ds.ground_truth[0];
    let extractor = ShallowExtractor::new(cfg.prior_size);
    let grid = FrameGrid::new(&first, cfg.prior_size);
    let weights = learn_prior_weights(&extractor.extract(&first)?, &grid.box_to_grid(&gt), cfg.lambda_s)?;
    let template = crop_window(&first, gt.cx, gt.cy, gt.w, gt.h, cfg.template_size);

    let frame = ds.frame(k - 1)?;
    let last = ds.ground_truth[k - 2];
    let grid = FrameGrid::new(&frame, cfg.prior_size);
    let smap = build_saliency_map(
        &extractor.extract(&frame)?,
        &weights,
        grid.to_grid(last.cx, last.cy),
        cfg.sigma_b,
        cfg.delta_s,
        cfg.center_penalty,
    )?;
    let min_area = grid.area_to_grid(cfg.sigma_s_factor * last.w * last.h);
    let mut cands = extract_candidates(&smap, &frame, &last, min_area, cfg.template_size);
    align_candidates(&mut cands, &frame, &last, &template, cfg.template_search_radius, cfg.template_search_step);
    let decision = decide_roi(&cands, &template, (last.cx, last.cy), cfg.sigma_c, cfg.delta_c, cfg.roi_tie_tolerance);

    fs::create_dir_all(out)?;
    save_heatmap(&smap.combined, &out.join(format!("{k:04}_prior_combined.png")))?;
    save_heatmap(&smap.penalized, &out.join(format!("{k:04}_prior_penalized.png")))?;
    save_png(&binary_image(&smap), &out.join(format!("{k:04}_prior_binary.png")))?;

    let rgb = frame.to_rgb();
    let (w, h) = (rgb.width(), rgb.height());
    let mut pixels = rgb.data().to_vec();
    for (i, c) in cands.iter().enumerate() {
        let color = if Some(i) == decision.winner { [1.0, 0.0, 0.0] } else { [1.0, 1.0, 0.0] };
        draw_rect(&mut pixels, w, h, &BoundingBox::new(c.centroid.0, c.centroid.1, last.w, last.h), color);
    }
    draw_rect(&mut pixels, w, h, &last, [0.0, 1.0, 0.0]);
    save_png(&Image::new(w, h, 3, pixels)?, &out.join(format!("{k:04}_prior_overlay.png")))?;

    let report = PriorReport {
        frame: k,
        previous_box: last.to_top_left(),
        min_area_grid: min_area,
        candidates: cands
            .iter()
            .zip(&decision.scores)
            .map(|(c, &score)| CandidateSummary { area: c.area(), centroid: c.centroid, score })
            .collect(),
        decision,
    };
    fs::write(out.join(format!("{k:04}_prior.json")), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
