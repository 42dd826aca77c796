//! The five regression heads and their first-frame training.

use crate::config::TrackerConfig;
use crate::convnet::{FeatureMaps, HeadNet, SelectorNet, TrainSpec};
use crate::error::{Result, SdtError};
use crate::features::{score_feature_saliency, select_top_features, SelectionMask};
use crate::geometry::{gaussian_map, BoundingBox};
use crate::image::HeatMap;

/// Training targets for the holistic head and the four quadrant heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTargets {
    pub holistic: HeatMap,
    /// TL, TR, BL, BR
    pub parts: [HeatMap; 4],
}

impl EnsembleTargets {
    /// Gaussian maps of the box and of its four quadrants, in map coordinates.
    pub fn new(b: &BoundingBox, size: usize, sigma_factor: f64) -> Result<Self> {
        let holistic = gaussian_map(b, size, size, sigma_factor)?;
        let q = b.quadrants();
        let part = |i: usize| gaussian_map(&q[i], size, size, sigma_factor);
        Ok(Self { holistic, parts: [part(0)?, part(1)?, part(2)?, part(3)?] })
    }
}

/// Per-head diagnostics from initialization.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct HeadInitReport {
    pub kept_channels: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// One holistic head on conv5-like features and four part heads on
/// conv4-like features, each reading its own subset of channels.
#[derive(Debug, Clone)]
pub struct HeadEnsemble {
    pub hnet: HeadNet,
    pnets: [HeadNet; 4],
    /// holistic mask first, then TL, TR, BL, BR
    masks: [SelectionMask; 5],
}

/// Derives a distinct stream seed per head so heads never share weights.
fn head_seed(seed: u64, head: u64, selector: bool) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(head * 2 + selector as u64 + 1)
}

fn train_head(
    cfg: &TrackerConfig,
    stack: &FeatureMaps,
    target: &HeatMap,
    head: u64,
) -> Result<(SelectionMask, HeadNet, HeadInitReport)> {
    let mut selector = SelectorNet::new(
        stack.channels(),
        cfg.selector_kernel,
        cfg.dropout_ratio,
        cfg.weight_init_std,
        head_seed(cfg.seed, head, true),
    )?;
    selector.train(stack, target, cfg.selector_iterations, cfg.selector_learning_rate)?;
    let scores = score_feature_saliency(&selector, stack, target)?;
    let mask = select_top_features(&scores, cfg.n_s);
    let input = stack.select(&mask.indices);
    let mut net = HeadNet::new(
        input.channels(),
        cfg.head_hidden_channels,
        cfg.head_kernel1,
        cfg.head_kernel2,
        cfg.weight_init_std,
        head_seed(cfg.seed, head, false),
    )?;
    let trace = net.train(&input, target, &TrainSpec::squared(cfg.init_iterations, cfg.head_learning_rate))?;
    let report = HeadInitReport {
        kept_channels: mask.indices.len(),
        initial_loss: trace.first().copied().unwrap_or(f64::NAN),
        final_loss: trace.last().copied().unwrap_or(f64::NAN),
    };
    Ok((mask, net, report))
}

impl HeadEnsemble {
    /// Selects channels and trains all five heads on the first frame.
    /// `gt_map` is the target box in heat-map coordinates.
    pub fn init(
        f4: &FeatureMaps,
        f5: &FeatureMaps,
        gt_map: &BoundingBox,
        cfg: &TrackerConfig,
    ) -> Result<(Self, [HeadInitReport; 5])> {
        let targets = EnsembleTargets::new(gt_map, cfg.map_size, cfg.gaussian_sigma_factor)?;
        let (m0, hnet, r0) = train_head(cfg, f5, &targets.holistic, 0)?;
        let (m1, p1, r1) = train_head(cfg, f4, &targets.parts[0], 1)?;
        let (m2, p2, r2) = train_head(cfg, f4, &targets.parts[1], 2)?;
        let (m3, p3, r3) = train_head(cfg, f4, &targets.parts[2], 3)?;
        let (m4, p4, r4) = train_head(cfg, f4, &targets.parts[3], 4)?;
        Ok((Self { hnet, pnets: [p1, p2, p3, p4], masks: [m0, m1, m2, m3, m4] }, [r0, r1, r2, r3, r4]))
    }

    pub fn pnets(&self) -> &[HeadNet; 4] {
        &self.pnets
    }

    pub fn masks(&self) -> &[SelectionMask; 5] {
        &self.masks
    }

    /// Conv5-like stack reduced to the holistic head's channels.
    pub fn holistic_input(&self, f5: &FeatureMaps) -> FeatureMaps {
        f5.select(&self.masks[0].indices)
    }

    pub fn holistic(&self, f5: &FeatureMaps) -> Result<HeatMap> {
        self.hnet.forward(&self.holistic_input(f5))
    }

    pub fn parts(&self, f4: &FeatureMaps) -> Result<[HeatMap; 4]> {
        let run = |i: usize| self.pnets[i].forward(&f4.select(&self.masks[i + 1].indices));
        Ok([run(0)?, run(1)?, run(2)?, run(3)?])
    }
}

/// Rejects boxes too small to split into four trainable quadrants.
pub fn check_box_size(b: &BoundingBox, min_side: f64) -> Result<()> {
    b.validate()?;
    if b.w < min_side || b.h < min_side {
        return Err(SdtError::InvalidBox(format!("{}x{} box is smaller than {min_side} px", b.w, b.h)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn part_targets_peak_at_quadrant_centers() {
        let b = BoundingBox::new(23.0, 23.0, 16.0, 12.0);
        let t = EnsembleTargets::new(&b, 46, 0.25).unwrap();
        let argmax = |m: &HeatMap| {
            let i = (0..m.values().len()).max_by(|&a, &b| m.values()[a].total_cmp(&m.values()[b])).unwrap();
            ((i % 46) as f64 + 0.5, (i / 46) as f64 + 0.5)
        };
        for (q, m) in b.quadrants().iter().zip(&t.parts) {
            let (x, y) = argmax(m);
            assert!((x - q.cx).abs() <= 0.5 && (y - q.cy).abs() <= 0.5, "{q:?} vs ({x},{y})");
        }
    }

    #[test]
    fn small_boxes_are_rejected() {
        assert!(check_box_size(&BoundingBox::new(10.0, 10.0, 7.0, 20.0), 8.0).is_err());
        assert!(check_box_size(&BoundingBox::new(10.0, 10.0, 8.0, 8.0), 8.0).is_ok());
    }
}
