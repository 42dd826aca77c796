//! Per-sequence tracking state and the frame loop.
//!
//! Each frame: choose the search window (from the color prior when
//! available), extract backbone features for it, run the five heads,
//! rectify the holistic map with the part votes, localize with particles,
//! then maintain the sample pool and maybe fine-tune the holistic head.

pub mod ensemble;
pub mod localize;
pub mod peaks;

pub use ensemble::{EnsembleTargets, HeadEnsemble, HeadInitReport};
pub use localize::{Localization, LocalizeParams, Particle, ScaleReference, TargetEstimate};
pub use peaks::{find_peaks, rectify_holistic, Peak, Rectification};

use crate::config::TrackerConfig;
use crate::convnet::FeatureMaps;
use crate::error::{Result, SdtError};
use crate::features::FeatureProvider;
use crate::geometry::{gaussian_map, BoundingBox, RoiTransform};
use crate::image::{HeatMap, Image};
use crate::prior::{
    align_candidates, box_mask, build_saliency_map, crop_window, decide_roi, extract_candidates, learn_prior_weights, FrameGrid,
    PriorWeights, RoiDecision, SaliencyMap, ShallowExtractor,
};
use crate::update::{
    check_update_conditions, finetune_hnet, FinetuneReport, FinetuneSpec, InsertOutcome, PoolEntry,
    PositiveSamplePool, UpdateDecision, UpdateGate,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::Arc;

/// Where the holistic head's fine-tuning sample comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateSource {
    /// drawn from the confidence pool, gated on confidence drop and ambiguity
    Prioritized,
    /// always the first frame, on every checkpoint
    FirstFrame,
    /// always the current frame, on every checkpoint
    CurrentFrame,
    Disabled,
}

/// Stage switches used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackerOptions {
    pub use_prior: bool,
    pub rectify: bool,
    pub update: UpdateSource,
}

impl Default for TrackerOptions {
    fn default() -> Self {
        Self { use_prior: true, rectify: true, update: UpdateSource::Prioritized }
    }
}

/// A fine-tuning event of the holistic head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub frame: usize,
    pub source: UpdateSource,
    pub chosen_frame: usize,
    pub probability: f64,
    pub pre_loss: f64,
    pub post_loss: f64,
    pub reverted: bool,
}

/// Per-frame diagnostics, one JSON line each in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    /// 1-based frame index
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub scale: f64,
    pub confidence: f64,
    pub used_prior: bool,
    pub roi_confidence: f64,
    pub holistic_peaks: usize,
    pub valid_parts: usize,
    pub rectified: bool,
    pub frozen: bool,
    pub update_fired: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update: Option<UpdateEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FrameRecord {
    /// The estimated box, center convention.
    pub fn estimate(&self) -> BoundingBox {
        let [x, y, w, h] = self.bbox;
        let mut b = BoundingBox::from_top_left(x, y, w, h);
        b.scale = self.scale;
        b
    }
}

/// Intermediate maps of the most recent frame, kept for debug dumps.
#[derive(Debug, Clone)]
pub struct FrameMaps {
    pub roi: RoiTransform,
    pub holistic: HeatMap,
    pub rectified: HeatMap,
    pub parts: [HeatMap; 4],
    pub saliency: Option<SaliencyMap>,
}

/// Frozen first-frame prior: channel weights and the target template.
#[derive(Debug, Clone)]
struct PriorModel {
    extractor: Arc<ShallowExtractor>,
    weights: PriorWeights,
    template: Image,
}

/// Tracking state for one sequence. Cloning forks an independent tracker,
/// which lets ablations share one initialization.
#[derive(Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    opts: TrackerOptions,
    provider: Arc<dyn FeatureProvider>,
    ensemble: HeadEnsemble,
    prior: Option<PriorModel>,
    init_reports: [HeadInitReport; 5],
    base: (f64, f64),
    estimate: TargetEstimate,
    reference: ScaleReference,
    recent: VecDeque<f64>,
    pool: PositiveSamplePool,
    first_entry: PoolEntry,
    rng: ChaCha8Rng,
    frame: usize,
    last_maps: Option<FrameMaps>,
}

/// Everything extracted for one search window.
struct WindowFeatures {
    roi: RoiTransform,
    f4: FeatureMaps,
    f5: FeatureMaps,
}

impl Tracker {
    /// Builds the prior, trains the heads on `frame` and `gt`, and returns
    /// the tracker with the record for frame 1.
    pub fn init(
        frame: &Image,
        gt: &BoundingBox,
        cfg: &TrackerConfig,
        opts: TrackerOptions,
        provider: Arc<dyn FeatureProvider>,
    ) -> Result<(Self, FrameRecord)> {
        let extractor = Arc::new(ShallowExtractor::new(cfg.prior_size));
        Self::init_with_extractor(frame, gt, cfg, opts, provider, extractor)
    }

    /// As [`Tracker::init`], reusing a shallow-feature extractor.
    pub fn init_with_extractor(
        frame: &Image,
        gt: &BoundingBox,
        cfg: &TrackerConfig,
        opts: TrackerOptions,
        provider: Arc<dyn FeatureProvider>,
        extractor: Arc<ShallowExtractor>,
    ) -> Result<(Self, FrameRecord)> {
        cfg.validate()?;
        ensemble::check_box_size(gt, cfg.min_box_side)?;
        if provider.input_size() == 0 {
            return Err(SdtError::Config("feature provider reports a zero input size".into()));
        }
        let mut gt = *gt;
        gt.scale = 1.0;
        let base = (gt.w, gt.h);

        let prior = if frame.is_color() {
            let stack = extractor.extract(frame)?;
            let grid = FrameGrid::new(frame, cfg.prior_size);
            let weights = learn_prior_weights(&stack, &grid.box_to_grid(&gt), cfg.lambda_s)?;
            let template = crop_window(frame, gt.cx, gt.cy, gt.w, gt.h, cfg.template_size);
            Some(PriorModel { extractor, weights, template })
        } else {
            None
        };

        let window = window_features(provider.as_ref(), frame, (gt.cx, gt.cy), &gt, cfg, 1)?;
        let gt_map = window.roi.box_to_map(&gt);
        let (ensemble, init_reports) = HeadEnsemble::init(&window.f4, &window.f5, &gt_map, cfg)?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let holistic = ensemble.holistic(&window.f5)?.clamped_nonnegative();
        // the same particle search on frame 1 gives the reference confidence
        let start = TargetEstimate { bbox: gt, confidence: 0.0, frozen: false };
        let probe = localize::localize(
            &holistic,
            &window.roi,
            (gt.cx, gt.cy),
            &start,
            base,
            None,
            None,
            &localize_params(cfg),
            &mut rng,
        );
        let c1 = probe.winner.map_or(0.0, |p| p.confidence);
        if !(c1 > 0.0) {
            return Err(SdtError::Config("holistic head gives no response on the first frame".into()));
        }
        let reference = ScaleReference { scale: 1.0, confidence: c1 };
        let first_entry = pool_entry(&ensemble, &window, &gt, reference.confidence, 1, cfg)?;
        let mut pool = PositiveSamplePool::new(cfg.pool_capacity, cfg.insert_ratio);
        pool.try_insert(first_entry.clone());
        let mut recent = VecDeque::with_capacity(cfg.freeze_window);
        recent.push_back(reference.confidence);

        let estimate = TargetEstimate { bbox: gt, confidence: reference.confidence, frozen: false };
        let parts = ensemble.parts(&window.f4)?;
        let maps = FrameMaps { roi: window.roi, holistic: holistic.clone(), rectified: holistic, parts, saliency: None };
        let tracker = Self {
            cfg: cfg.clone(),
            opts,
            provider,
            ensemble,
            prior,
            init_reports,
            base,
            estimate,
            reference,
            recent,
            pool,
            first_entry,
            rng,
            frame: 1,
            last_maps: Some(maps),
        };
        let record = tracker.record(&estimate, None, 0, 0, false, None, None);
        Ok((tracker, record))
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn options(&self) -> TrackerOptions {
        self.opts
    }

    pub fn set_options(&mut self, opts: TrackerOptions) {
        self.opts = opts;
    }

    pub fn ensemble(&self) -> &HeadEnsemble {
        &self.ensemble
    }

    pub fn init_reports(&self) -> &[HeadInitReport; 5] {
        &self.init_reports
    }

    pub fn estimate(&self) -> &TargetEstimate {
        &self.estimate
    }

    pub fn reference(&self) -> ScaleReference {
        self.reference
    }

    pub fn pool(&self) -> &PositiveSamplePool {
        &self.pool
    }

    pub fn has_prior(&self) -> bool {
        self.prior.is_some()
    }

    /// Index of the last processed frame, 1-based.
    pub fn frame_index(&self) -> usize {
        self.frame
    }

    pub fn last_maps(&self) -> Option<&FrameMaps> {
        self.last_maps.as_ref()
    }

    /// Prior-map ROI decision for `frame` around the current estimate.
    pub fn prior_decision(&self, frame: &Image) -> Result<(SaliencyMap, RoiDecision)> {
        let prior = self.prior.as_ref().ok_or(SdtError::GrayscalePrior(1))?;
        let cfg = &self.cfg;
        let stack = prior.extractor.extract(frame)?;
        let grid = FrameGrid::new(frame, cfg.prior_size);
        let last = self.estimate.bbox;
        let smap = build_saliency_map(
            &stack,
            &prior.weights,
            grid.to_grid(last.cx, last.cy),
            cfg.sigma_b,
            cfg.delta_s,
            cfg.center_penalty,
        )?;
        let min_area = grid.area_to_grid(cfg.sigma_s_factor * last.w * last.h);
        let mut cands = extract_candidates(&smap, frame, &last, min_area, cfg.template_size);
        align_candidates(&mut cands, frame, &last, &prior.template, cfg.template_search_radius, cfg.template_search_step);
        let decision = decide_roi(
            &cands,
            &prior.template,
            (last.cx, last.cy),
            cfg.sigma_c,
            cfg.delta_c,
            cfg.roi_tie_tolerance,
        );
        Ok((smap, decision))
    }

    /// Processes the next frame. Stage failures never abort: the previous
    /// box is kept, the frame is marked frozen and the error is recorded.
    pub fn track(&mut self, frame: &Image) -> FrameRecord {
        self.frame += 1;
        match self.step(frame) {
            Ok(r) => r,
            Err(e) => {
                self.frame -= 1;
                self.skip(e.to_string())
            }
        }
    }

    /// Advances past a frame that could not be processed at all, keeping
    /// the previous box.
    pub fn skip(&mut self, reason: String) -> FrameRecord {
        self.frame += 1;
        self.estimate.frozen = true;
        let est = TargetEstimate { bbox: self.estimate.bbox, confidence: 0.0, frozen: true };
        self.record(&est, None, 0, 0, false, None, Some(reason))
    }

    fn step(&mut self, frame: &Image) -> Result<FrameRecord> {
        let cfg = self.cfg.clone();
        let t = self.frame;
        let prev = self.estimate;

        let (saliency, decision) = if self.opts.use_prior && self.prior.is_some() && frame.is_color() {
            let (s, d) = self.prior_decision(frame)?;
            (Some(s), Some(d))
        } else {
            (None, None)
        };
        let roi_center = decision.as_ref().map_or((prev.bbox.cx, prev.bbox.cy), |d| d.center);

        let window = window_features(self.provider.as_ref(), frame, roi_center, &prev.bbox, &cfg, t as u32)?;
        let raw = self.ensemble.holistic(&window.f5)?;
        let parts = self.ensemble.parts(&window.f4)?;
        let holistic = raw.clamped_nonnegative();
        let peaks = find_peaks(&holistic, cfg.peak_ratio);
        let rect = if self.opts.rectify {
            peaks::rectify_with_peaks(&holistic, &peaks, &parts, cfg.peak_ratio, cfg.rectify_min_peaks)
        } else {
            Rectification {
                map: holistic.clone(),
                holistic_peaks: peaks.len(),
                valid_parts: 0,
                fired: false,
                distances: Vec::new(),
                kept: None,
            }
        };

        let freeze_below = median(&self.recent).map(|m| cfg.freeze_ratio * m);
        let loc = localize::localize(
            &rect.map,
            &window.roi,
            roi_center,
            &prev,
            self.base,
            Some(&self.reference),
            freeze_below,
            &localize_params(&cfg),
            &mut self.rng,
        );
        let est = loc.estimate;
        self.estimate = est;

        let mut update = None;
        if !est.frozen {
            if self.recent.len() == cfg.freeze_window {
                self.recent.pop_front();
            }
            self.recent.push_back(est.confidence);
            let current = pool_entry(&self.ensemble, &window, &est.bbox, est.confidence, t, &cfg)?;
            update = self.maybe_update(&current, peaks.len(), &cfg)?;
            if self.opts.update == UpdateSource::Prioritized {
                let _: InsertOutcome = self.pool.try_insert(current);
            }
        }

        self.last_maps = Some(FrameMaps { roi: window.roi, holistic, rectified: rect.map.clone(), parts, saliency });
        Ok(self.record(&est, decision.as_ref(), rect.holistic_peaks, rect.valid_parts, rect.fired, update, None))
    }

    fn maybe_update(&mut self, current: &PoolEntry, peak_count: usize, cfg: &TrackerConfig) -> Result<Option<UpdateEvent>> {
        let t = current.frame;
        if self.opts.update == UpdateSource::Disabled || t % cfg.update_period != 0 {
            return Ok(None);
        }
        let spec = FinetuneSpec {
            iterations: cfg.finetune_iterations,
            learning_rate: cfg.finetune_learning_rate,
            beta_w: cfg.beta_w,
            k: cfg.trunc_k,
            mu: cfg.trunc_mu,
        };
        let (positive, probability) = match self.opts.update {
            UpdateSource::Prioritized => {
                let gate = UpdateGate {
                    period: cfg.update_period,
                    confidence_ratio: cfg.update_confidence_ratio,
                    theta: cfg.theta,
                };
                let d: UpdateDecision =
                    check_update_conditions(&self.pool, current.confidence, peak_count, t, &gate, &mut self.rng);
                match (d.fire, d.chosen) {
                    (true, Some(i)) => (self.pool.entries()[i].clone(), d.probability.unwrap_or(1.0)),
                    _ => return Ok(None),
                }
            }
            UpdateSource::FirstFrame => (self.first_entry.clone(), 1.0),
            UpdateSource::CurrentFrame => (current.clone(), 1.0),
            UpdateSource::Disabled => unreachable!(),
        };
        let report: FinetuneReport = finetune_hnet(&mut self.ensemble.hnet, &positive, current, &spec)?;
        Ok(Some(UpdateEvent {
            frame: t,
            source: self.opts.update,
            chosen_frame: positive.frame,
            probability,
            pre_loss: report.pre_loss,
            post_loss: report.post_loss,
            reverted: report.reverted,
        }))
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        est: &TargetEstimate,
        decision: Option<&RoiDecision>,
        holistic_peaks: usize,
        valid_parts: usize,
        rectified: bool,
        update: Option<UpdateEvent>,
        error: Option<String>,
    ) -> FrameRecord {
        FrameRecord {
            frame: self.frame,
            bbox: est.bbox.to_top_left(),
            scale: est.bbox.scale,
            confidence: est.confidence,
            used_prior: decision.is_some_and(|d| d.used_prior),
            roi_confidence: decision.map_or(0.0, |d| d.confidence),
            holistic_peaks,
            valid_parts,
            rectified,
            frozen: est.frozen,
            update_fired: update.is_some(),
            update,
            error,
        }
    }
}

fn localize_params(cfg: &TrackerConfig) -> LocalizeParams {
    LocalizeParams {
        particles: cfg.particles,
        translation_std: cfg.particle_translation_std,
        scale_std: cfg.particle_scale_std,
        gamma: cfg.gamma,
        lambda_sigma: cfg.lambda_sigma,
        min_scale: cfg.min_scale,
        max_scale: cfg.max_scale,
    }
}

/// Square search window around `center` sized from `reference_box`.
pub fn search_window(center: (f64, f64), reference_box: &BoundingBox, cfg: &TrackerConfig) -> RoiTransform {
    let side = cfg.roi_scale * reference_box.w.max(reference_box.h);
    RoiTransform::centered(center.0, center.1, side, cfg.map_size)
}

fn window_features(
    provider: &dyn FeatureProvider,
    frame: &Image,
    center: (f64, f64),
    reference_box: &BoundingBox,
    cfg: &TrackerConfig,
    frame_id: u32,
) -> Result<WindowFeatures> {
    let roi = search_window(center, reference_box, cfg);
    let n = provider.input_size();
    let patch = frame.crop_resized(roi.x0, roi.y0, roi.side, roi.side, n, n);
    let (f4, f5) = provider.provide(&patch, frame_id)?;
    for s in [&f4, &f5] {
        if s.maps.width() != cfg.map_size || s.maps.height() != cfg.map_size {
            return Err(SdtError::Shape(format!(
                "provider returned {}x{} maps, expected {}",
                s.maps.width(),
                s.maps.height(),
                cfg.map_size
            )));
        }
    }
    Ok(WindowFeatures { roi, f4: f4.maps, f5: f5.maps })
}

/// Pool sample for a frame: masked holistic features, the Gaussian target
/// of the estimated box and its foreground mask, all on the map raster.
fn pool_entry(
    ensemble: &HeadEnsemble,
    window: &WindowFeatures,
    b: &BoundingBox,
    confidence: f64,
    frame: usize,
    cfg: &TrackerConfig,
) -> Result<PoolEntry> {
    let m = window.roi.box_to_map(b);
    Ok(PoolEntry {
        frame,
        features: ensemble.holistic_input(&window.f5),
        target: gaussian_map(&m, cfg.map_size, cfg.map_size, cfg.gaussian_sigma_factor)?,
        foreground: box_mask(&m, cfg.map_size),
        confidence,
    })
}

fn median(values: &VecDeque<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
