use crate::error::{Result, SdtError};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How the distance-to-previous-center penalty shapes the prior map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterPenalty {
    /// `delta_s * (1 - d / d_max)`: pixels near the previous center win.
    Decreasing,
    /// `delta_s * d / d_max`: grows with distance.
    Literal,
}

/// Every tunable of the tracker. Serialized as a flat JSON object; unknown
/// keys are rejected and missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub seed: u64,

    // prior map
    pub prior_size: usize,
    pub sigma_b: f64,
    pub sigma_s_factor: f64,
    pub sigma_c: f64,
    pub delta_s: f64,
    pub delta_c: f64,
    pub center_penalty: CenterPenalty,
    pub lambda_s: f64,
    pub template_size: usize,
    /// Offset search when matching candidate patches against the template:
    /// radius and grid step in frame pixels.
    pub template_search_radius: f64,
    pub template_search_step: f64,
    /// Candidates within this relative margin of the best template score
    /// are tied and resolved by distance to the previous center.
    pub roi_tie_tolerance: f64,
    pub roi_scale: f64,

    // heads and feature selection
    pub map_size: usize,
    pub gaussian_sigma_factor: f64,
    pub head_hidden_channels: usize,
    pub head_kernel1: usize,
    pub head_kernel2: usize,
    pub weight_init_std: f64,
    pub init_iterations: usize,
    pub head_learning_rate: f64,
    pub selector_iterations: usize,
    pub selector_learning_rate: f64,
    pub selector_kernel: usize,
    pub dropout_ratio: f64,
    pub n_s: usize,

    // localization
    pub peak_ratio: f64,
    pub rectify_min_peaks: usize,
    pub particles: usize,
    pub particle_translation_std: f64,
    pub particle_scale_std: f64,
    pub gamma: f64,
    pub lambda_sigma: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub freeze_ratio: f64,
    pub freeze_window: usize,
    pub min_box_side: f64,

    // online update
    pub pool_capacity: usize,
    pub insert_ratio: f64,
    pub theta: f64,
    pub update_period: usize,
    pub update_confidence_ratio: f64,
    pub finetune_iterations: usize,
    pub finetune_learning_rate: f64,
    pub beta_w: f64,
    pub trunc_k: f64,
    pub trunc_mu: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            prior_size: 200,
            sigma_b: 0.2,
            sigma_s_factor: 0.4,
            sigma_c: 0.2,
            delta_s: 2.0,
            delta_c: 0.01,
            center_penalty: CenterPenalty::Decreasing,
            lambda_s: 1.0,
            template_size: 32,
            template_search_radius: 2.0,
            template_search_step: 0.25,
            roi_tie_tolerance: 0.05,
            roi_scale: 2.0,
            map_size: 46,
            gaussian_sigma_factor: 0.25,
            head_hidden_channels: 8,
            head_kernel1: 9,
            head_kernel2: 5,
            weight_init_std: 0.01,
            init_iterations: 100,
            head_learning_rate: 1e-5,
            selector_iterations: 50,
            selector_learning_rate: 1e-5,
            selector_kernel: 3,
            dropout_ratio: 0.3,
            n_s: 384,
            peak_ratio: 0.8,
            rectify_min_peaks: 2,
            particles: 700,
            particle_translation_std: 0.1,
            particle_scale_std: 0.05,
            gamma: 0.7,
            lambda_sigma: 0.5,
            min_scale: 0.25,
            max_scale: 4.0,
            freeze_ratio: 0.1,
            freeze_window: 20,
            min_box_side: 8.0,
            pool_capacity: 10,
            insert_ratio: 0.85,
            theta: 0.7,
            update_period: 10,
            update_confidence_ratio: 2.0,
            finetune_iterations: 20,
            finetune_learning_rate: 1e-5,
            beta_w: 1e-3,
            trunc_k: 20.0,
            trunc_mu: 30.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, what: &str| {
            if !ok {
                bad.push(what.to_string());
            }
        };
        check(self.prior_size >= 16, "prior_size >= 16");
        check((0.0..=1.0).contains(&self.sigma_b), "sigma_b in [0,1]");
        check(self.sigma_s_factor >= 0.0, "sigma_s_factor >= 0");
        check((0.0..=1.0).contains(&self.sigma_c), "sigma_c in [0,1]");
        check(self.delta_s > 0.0, "delta_s > 0");
        check(self.delta_c > 0.0, "delta_c > 0");
        check(self.lambda_s >= 0.0, "lambda_s >= 0");
        check(self.template_size >= 4, "template_size >= 4");
        check(self.template_search_radius >= 0.0, "template_search_radius >= 0");
        check(self.template_search_step > 0.0, "template_search_step > 0");
        check((0.0..1.0).contains(&self.roi_tie_tolerance), "roi_tie_tolerance in [0,1)");
        check(self.roi_scale >= 1.0, "roi_scale >= 1");
        check(self.map_size >= 8, "map_size >= 8");
        check(self.gaussian_sigma_factor > 0.0, "gaussian_sigma_factor > 0");
        check(self.head_hidden_channels >= 1, "head_hidden_channels >= 1");
        for (k, name) in [
            (self.head_kernel1, "head_kernel1 odd"),
            (self.head_kernel2, "head_kernel2 odd"),
            (self.selector_kernel, "selector_kernel odd"),
        ] {
            check(k % 2 == 1, name);
        }
        check(self.weight_init_std > 0.0, "weight_init_std > 0");
        check(self.init_iterations >= 1, "init_iterations >= 1");
        check(self.head_learning_rate > 0.0, "head_learning_rate > 0");
        check(self.selector_iterations >= 1, "selector_iterations >= 1");
        check(self.selector_learning_rate > 0.0, "selector_learning_rate > 0");
        check((0.0..1.0).contains(&self.dropout_ratio), "dropout_ratio in [0,1)");
        check(self.n_s >= 1, "n_s >= 1");
        check(self.peak_ratio > 0.0 && self.peak_ratio <= 1.0, "peak_ratio in (0,1]");
        check(self.rectify_min_peaks >= 2, "rectify_min_peaks >= 2");
        check(self.particles >= 1, "particles >= 1");
        check(self.particle_translation_std >= 0.0, "particle_translation_std >= 0");
        check(self.particle_scale_std >= 0.0, "particle_scale_std >= 0");
        check((0.0..1.0).contains(&self.gamma), "gamma in [0,1)");
        check((0.0..=1.0).contains(&self.lambda_sigma), "lambda_sigma in [0,1]");
        check(self.min_scale > 0.0 && self.min_scale <= 1.0 && self.max_scale >= 1.0, "0 < min_scale <= 1 <= max_scale");
        check((0.0..1.0).contains(&self.freeze_ratio), "freeze_ratio in [0,1)");
        check(self.freeze_window >= 1, "freeze_window >= 1");
        check(self.min_box_side > 0.0, "min_box_side > 0");
        check(self.pool_capacity >= 1, "pool_capacity >= 1");
        check(self.insert_ratio > 0.0 && self.insert_ratio <= 1.0, "insert_ratio in (0,1]");
        check(self.theta < 1.0, "theta < 1");
        check(self.update_period >= 1, "update_period >= 1");
        check(self.update_confidence_ratio > 0.0, "update_confidence_ratio > 0");
        check(self.finetune_learning_rate > 0.0, "finetune_learning_rate > 0");
        check(self.beta_w >= 0.0, "beta_w >= 0");
        check(self.trunc_k > 0.0 && self.trunc_mu >= 0.0, "trunc_k > 0, trunc_mu >= 0");
        if bad.is_empty() {
            Ok(())
        } else {
            Err(SdtError::Config(bad.join(", ")))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrackerConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
