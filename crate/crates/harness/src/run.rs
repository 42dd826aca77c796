//! Running the tracker over sequences, with ablation switches.

use crate::dataset::SequenceDataset;
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate, EvalReport};
use sdt_core::features::FeatureProvider;
use sdt_core::prior::ShallowExtractor;
use sdt_core::tracker::{FrameRecord, Tracker, TrackerOptions, UpdateSource};
use sdt_core::TrackerConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

/// Pipeline variants compared in ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoUpdate,
    UpdateFirstFrameOnly,
    UpdateCurrentFrame,
    NoPrior,
    NoRectify,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoUpdate,
        Ablation::UpdateFirstFrameOnly,
        Ablation::UpdateCurrentFrame,
        Ablation::NoPrior,
        Ablation::NoRectify,
    ];

    pub fn options(self) -> TrackerOptions {
        let full = TrackerOptions::default();
        match self {
            Ablation::Full => full,
            Ablation::NoUpdate => TrackerOptions { update: UpdateSource::Disabled, ..full },
            Ablation::UpdateFirstFrameOnly => TrackerOptions { update: UpdateSource::FirstFrame, ..full },
            Ablation::UpdateCurrentFrame => TrackerOptions { update: UpdateSource::CurrentFrame, ..full },
            Ablation::NoPrior => TrackerOptions { use_prior: false, ..full },
            Ablation::NoRectify => TrackerOptions { rectify: false, ..full },
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoUpdate => "no_update",
            Ablation::UpdateFirstFrameOnly => "update_first_frame_only",
            Ablation::UpdateCurrentFrame => "update_current_frame",
            Ablation::NoPrior => "no_prior",
            Ablation::NoRectify => "no_rectify",
        }
    }
}

impl FromStr for Ablation {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| HarnessError::Validation(format!("unknown ablation {s:?}")))
    }
}

/// Per-frame records of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub sequence: String,
    pub ablation: Ablation,
    pub records: Vec<FrameRecord>,
}

impl Trace {
    pub fn update_events(&self) -> usize {
        self.records.iter().filter(|r| r.update_fired).count()
    }

    /// Writes one JSON object per frame.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Reads the records of a trace file.
pub fn read_trace(path: &Path) -> Result<Vec<FrameRecord>> {
    let file = fs::File::open(path).map_err(|e| HarnessError::file(path, e.to_string()))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| HarnessError::file(path, format!("line {}: {e}", n + 1)))?;
        records.push(r);
    }
    Ok(records)
}

/// Called after every frame with the tracker state and its record.
pub type FrameObserver<'a> = dyn FnMut(&Tracker, &FrameRecord) + 'a;

/// Initializes on frame 1 of `ds`.
pub fn init_tracker(
    ds: &SequenceDataset,
    cfg: &TrackerConfig,
    opts: TrackerOptions,
    provider: Arc<dyn FeatureProvider>,
    extractor: Arc<ShallowExtractor>,
) -> Result<(Tracker, FrameRecord)> {
    let first = ds.frame(0)?;
    let gt = ds.ground_truth.first().ok_or_else(|| HarnessError::Validation("no initial box".into()))?;
    Ok(Tracker::init_with_extractor(&first, gt, cfg, opts, provider, extractor)?)
}

/// Tracks frames 2.. from an initialized tracker. Frames that fail to load
/// become frozen records rather than aborting the run.
pub fn continue_run(
    mut tracker: Tracker,
    first: FrameRecord,
    ds: &SequenceDataset,
    ablation: Ablation,
    mut observer: Option<&mut FrameObserver>,
) -> Trace {
    tracker.set_options(ablation.options());
    let mut records = Vec::with_capacity(ds.len());
    if let Some(obs) = observer.as_mut() {
        obs(&tracker, &first);
    }
    records.push(first);
    for i in 1..ds.len() {
        let r = match ds.frame(i) {
            Ok(img) => tracker.track(&img),
            Err(e) => tracker.skip(e.to_string()),
        };
        if let Some(obs) = observer.as_mut() {
            obs(&tracker, &r);
        }
        records.push(r);
    }
    Trace { sequence: ds.name.clone(), ablation, records }
}

pub fn run_tracker(
    ds: &SequenceDataset,
    cfg: &TrackerConfig,
    ablation: Ablation,
    provider: Arc<dyn FeatureProvider>,
    observer: Option<&mut FrameObserver>,
) -> Result<Trace> {
    let extractor = Arc::new(ShallowExtractor::new(cfg.prior_size));
    let (tracker, first) = init_tracker(ds, cfg, ablation.options(), provider, extractor)?;
    Ok(continue_run(tracker, first, ds, ablation, observer))
}

/// Runs several variants from one shared first-frame initialization.
/// Initialization does not depend on the variant, so this equals separate
/// runs while training the heads only once.
pub fn run_ablations(
    ds: &SequenceDataset,
    cfg: &TrackerConfig,
    ablations: &[Ablation],
    provider: Arc<dyn FeatureProvider>,
) -> Result<Vec<Trace>> {
    let extractor = Arc::new(ShallowExtractor::new(cfg.prior_size));
    let (tracker, first) = init_tracker(ds, cfg, TrackerOptions::default(), provider, extractor)?;
    Ok(ablations.iter().map(|&a| continue_run(tracker.clone(), first.clone(), ds, a, None)).collect())
}

/// Tracks and scores every sequence on up to `threads` worker threads.
/// Reports come back sorted by sequence name.
pub fn run_benchmark(
    datasets: &[SequenceDataset],
    cfg: &TrackerConfig,
    ablation: Ablation,
    provider: Arc<dyn FeatureProvider>,
    threads: usize,
) -> Vec<(String, Result<EvalReport>)> {
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..threads.max(1).min(datasets.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(ds) = datasets.get(i) else { break };
                let report = run_tracker(ds, cfg, ablation, provider.clone(), None)
                    .and_then(|t| evaluate(&t.records, &ds.ground_truth).map(|s| EvalReport::new(&t, s, cfg)));
                results.lock().expect("no poisoned workers").push((ds.name.clone(), report));
            });
        }
    });
    let mut out = results.into_inner().expect("no poisoned workers");
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}
