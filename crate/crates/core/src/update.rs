//! Online refresh of the holistic head from a pool of confident frames.
//!
//! Confident frames enter a small pool. Every few frames one entry is drawn
//! with probability favoring recent-or-early, high-confidence samples; when
//! that sample is much more confident than the current frame and the
//! current holistic map is ambiguous, the head is fine-tuned on the sample's
//! foreground plus the current frame's background with a truncated loss.

use crate::convnet::{FeatureMaps, HeadNet, Loss, TruncatedLoss};
use crate::error::{Result, SdtError};
use crate::image::HeatMap;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::Serialize;

/// A training pair for the holistic head plus its foreground labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    /// 1-based frame index
    pub frame: usize,
    /// masked conv5-like features of the frame's ROI
    pub features: FeatureMaps,
    /// Gaussian target built from the estimated box
    pub target: HeatMap,
    /// 1 inside the estimated box on the heat-map raster, else 0
    pub foreground: Vec<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertOutcome {
    Inserted,
    /// evicted the entry of this frame
    Replaced(usize),
    Rejected,
}

#[derive(Debug, Clone)]
pub struct PositiveSamplePool {
    capacity: usize,
    insert_ratio: f64,
    entries: Vec<PoolEntry>,
}

impl PositiveSamplePool {
    pub fn new(capacity: usize, insert_ratio: f64) -> Self {
        assert!(capacity >= 1);
        Self { capacity, insert_ratio, entries: Vec::with_capacity(capacity) }
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn min_index(&self) -> Option<usize> {
        (0..self.entries.len()).min_by(|&a, &b| {
            self.entries[a]
                .confidence
                .total_cmp(&self.entries[b].confidence)
                .then(self.entries[a].frame.cmp(&self.entries[b].frame))
        })
    }

    pub fn min_confidence(&self) -> Option<f64> {
        self.min_index().map(|i| self.entries[i].confidence)
    }

    pub fn max_confidence(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.confidence).reduce(f64::max)
    }

    /// Inserts while there is room; once full, replaces the least confident
    /// entry if the newcomer beats it or comes close to the best one.
    pub fn try_insert(&mut self, entry: PoolEntry) -> InsertOutcome {
        if !(entry.confidence > 0.0 && entry.confidence.is_finite())
            || self.entries.iter().any(|e| e.frame == entry.frame)
        {
            return InsertOutcome::Rejected;
        }
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            return InsertOutcome::Inserted;
        }
        let min_i = self.min_index().expect("full pool");
        let min_c = self.entries[min_i].confidence;
        let max_c = self.max_confidence().expect("full pool");
        if entry.confidence > min_c || entry.confidence / max_c > self.insert_ratio {
            let evicted = self.entries[min_i].frame;
            self.entries[min_i] = entry;
            InsertOutcome::Replaced(evicted)
        } else {
            InsertOutcome::Rejected
        }
    }
}

/// Quadratic weight over frame index `tau` in `[1, t]`: 1 at both ends and
/// dipping toward `theta` in between, favoring early and recent frames.
pub fn temporal_weight(tau: f64, t: f64, theta: f64) -> f64 {
    if t <= 2.0 {
        return 1.0;
    }
    let d = t * (t - 2.0);
    let a = 4.0 * (1.0 - theta) / d;
    let b = 4.0 * (t + 1.0) * (theta - 1.0) / d;
    let c = (t - 4.0 * theta + 2.0) / (t - 2.0);
    a * tau * tau + b * tau + c
}

/// Draw probabilities over pool entries at frame `t`.
pub fn selection_distribution(pool: &PositiveSamplePool, t: usize, theta: f64) -> Result<Vec<f64>> {
    let max_c = pool.max_confidence().ok_or(SdtError::EmptyPool)?;
    let index: Vec<f64> = pool
        .entries()
        .iter()
        .map(|e| (temporal_weight(e.frame as f64, t as f64, theta) * e.confidence / max_c).max(0.0))
        .collect();
    let total: f64 = index.iter().sum();
    if total <= 0.0 {
        let n = index.len() as f64;
        return Ok(vec![1.0 / n; index.len()]);
    }
    Ok(index.iter().map(|i| i / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateDecision {
    pub checkpoint: bool,
    pub fire: bool,
    /// pool index of the drawn entry
    pub chosen: Option<usize>,
    pub chosen_frame: Option<usize>,
    pub probability: Option<f64>,
    /// drawn confidence over current confidence
    pub ratio: Option<f64>,
    pub peak_count: usize,
    pub current_confidence: f64,
}

/// Gating parameters for [`check_update_conditions`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateGate {
    pub period: usize,
    pub confidence_ratio: f64,
    pub theta: f64,
}

/// Fires on checkpoint frames when a drawn pool sample is more than
/// `confidence_ratio` times as confident as the current frame and the
/// current holistic map has at least two peaks.
pub fn check_update_conditions<R: Rng>(
    pool: &PositiveSamplePool,
    current_confidence: f64,
    peak_count: usize,
    frame: usize,
    gate: &UpdateGate,
    rng: &mut R,
) -> UpdateDecision {
    let mut d = UpdateDecision {
        checkpoint: frame % gate.period == 0,
        fire: false,
        chosen: None,
        chosen_frame: None,
        probability: None,
        ratio: None,
        peak_count,
        current_confidence,
    };
    if !d.checkpoint {
        return d;
    }
    let Ok(probs) = selection_distribution(pool, frame, gate.theta) else {
        return d;
    };
    let dist = WeightedIndex::new(&probs).expect("valid probabilities");
    let n = dist.sample(rng);
    let c_n = pool.entries()[n].confidence;
    d.chosen = Some(n);
    d.chosen_frame = Some(pool.entries()[n].frame);
    d.probability = Some(probs[n]);
    d.ratio = Some(if current_confidence > 0.0 { c_n / current_confidence } else { f64::INFINITY });
    d.fire = c_n > gate.confidence_ratio * current_confidence && peak_count >= 2;
    d
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneSpec {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta_w: f64,
    pub k: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub epsilon: f64,
    pub pre_loss: f64,
    pub post_loss: f64,
    pub steps: usize,
    pub reverted: bool,
}

/// One training sample of the fine-tune objective.
pub struct TuneSample<'a> {
    pub features: &'a FeatureMaps,
    pub target: &'a HeatMap,
    pub loss: Loss,
}

/// Objective value: weighted truncated data terms plus `beta ||W||^2`.
pub fn finetune_objective(hnet: &HeadNet, samples: &[TuneSample], beta_w: f64) -> Result<f64> {
    let mut total = beta_w * hnet.weight_sq_norm();
    for s in samples {
        let out = hnet.forward(s.features)?;
        total += s.loss.evaluate(out.values(), s.target.values()).0;
    }
    Ok(total)
}

/// One SGD step on the summed objective; returns the pre-step value.
pub fn finetune_step(hnet: &mut HeadNet, samples: &[TuneSample], lr: f64, beta_w: f64) -> Result<f64> {
    let mut total = beta_w * hnet.weight_sq_norm();
    let mut grads = None;
    for s in samples {
        let (v, g) = hnet.loss_and_grads(s.features, s.target, &s.loss)?;
        total += v;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => acc.add(&g),
        }
    }
    if !total.is_finite() {
        return Err(SdtError::Divergence { iteration: 0, loss: total });
    }
    if let Some(g) = grads {
        hnet.apply(&g, lr, beta_w);
    }
    Ok(total)
}

/// Fine-tunes on the positive sample's foreground and the current frame's
/// background. The truncation scale is the largest absolute residual over
/// both maps before the first step. Divergence restores the original weights.
pub fn finetune_hnet(hnet: &mut HeadNet, positive: &PoolEntry, current: &PoolEntry, spec: &FinetuneSpec) -> Result<FinetuneReport> {
    let max_residual = |e: &PoolEntry| -> Result<f64> {
        let out = hnet.forward(&e.features)?;
        Ok(out.values().iter().zip(e.target.values()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    };
    let epsilon = max_residual(positive)?.max(max_residual(current)?);
    let truncated = |e: &PoolEntry, mask: Vec<f64>| {
        Loss::Truncated(TruncatedLoss { epsilon, k: spec.k, mu: spec.mu, mask, phi: e.target.values().to_vec() })
    };
    let samples = [
        TuneSample { features: &positive.features, target: &positive.target, loss: truncated(positive, positive.foreground.clone()) },
        TuneSample {
            features: &current.features,
            target: &current.target,
            loss: truncated(current, current.foreground.iter().map(|f| 1.0 - f).collect()),
        },
    ];
    let backup = hnet.clone();
    let mut pre_loss = None;
    for it in 0..spec.iterations {
        match finetune_step(hnet, &samples, spec.learning_rate, spec.beta_w) {
            Ok(v) => {
                pre_loss.get_or_insert(v);
            }
            Err(SdtError::Divergence { loss, .. }) => {
                *hnet = backup;
                return Ok(FinetuneReport {
                    epsilon,
                    pre_loss: pre_loss.unwrap_or(loss),
                    post_loss: loss,
                    steps: it,
                    reverted: true,
                });
            }
            Err(e) => {
                *hnet = backup;
                return Err(e);
            }
        }
    }
    let post_loss = finetune_objective(hnet, &samples, spec.beta_w)?;
    if !post_loss.is_finite() {
        *hnet = backup;
        return Ok(FinetuneReport { epsilon, pre_loss: pre_loss.unwrap_or(post_loss), post_loss, steps: spec.iterations, reverted: true });
    }
    Ok(FinetuneReport {
        epsilon,
        pre_loss: pre_loss.unwrap_or(post_loss),
        post_loss,
        steps: spec.iterations,
        reverted: false,
    })
}
