use clap::{Parser, Subcommand};
use sdt_core::features::{FeatureProvider, FileProvider, StandInProvider};
use sdt_core::TrackerConfig;
use sdt_harness::dataset::{load_sequence, GroundTruth};
use sdt_harness::dump::{dump_frame_maps, prior_debug};
use sdt_harness::error::{HarnessError, Result};
use sdt_harness::eval::{evaluate, EvalReport};
use sdt_harness::run::{read_trace, run_benchmark, run_tracker, Ablation, FrameObserver};
use sdt_harness::selftest;
use sdt_harness::synth::{synthesize, SyntheticSpec};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "sdt", version, about = "Single-target visual tracker with prior-map ROI selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track one sequence and write trace.jsonl (plus report.json when
    /// every frame has ground truth).
    Track {
        seq_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        ablation: Ablation,
        /// write per-frame heat maps as PNG files here
        #[arg(long)]
        dump_maps: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// `stand-in` or `file:<data>`; the index is read from `<data>.idx`
        #[arg(long, default_value = "stand-in")]
        provider: String,
    },
    /// Score a trace against a sequence's ground truth.
    Eval { trace: PathBuf, seq_dir: PathBuf },
    /// Dump the prior-map stage for one frame.
    Prior {
        seq_dir: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Render a synthetic sequence from a JSON description.
    Synth { spec: PathBuf, out_dir: PathBuf },
    /// Run the oracle checks.
    Selftest,
    /// Track every sequence under a directory and print a summary.
    Bench {
        root: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        ablation: Ablation,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value = "stand-in")]
        provider: String,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrackerConfig> {
    let mut cfg = match path {
        Some(p) => TrackerConfig::load(p)?,
        None => TrackerConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn make_provider(spec: &str, cfg: &TrackerConfig) -> Result<Arc<dyn FeatureProvider>> {
    if spec == "stand-in" {
        return Ok(Arc::new(StandInProvider::new(cfg.map_size)));
    }
    let Some(data) = spec.strip_prefix("file:") else {
        return Err(HarnessError::Validation(format!("unknown provider {spec:?}")));
    };
    let data = PathBuf::from(data);
    let mut index = data.clone().into_os_string();
    index.push(".idx");
    Ok(Arc::new(FileProvider::open(&data, Path::new(&index), 2 * cfg.map_size)?))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Track { seq_dir, config, ablation, dump_maps, seed, out, provider } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let ds = load_sequence(&seq_dir, GroundTruth::FirstOnly)?;
            let provider = make_provider(&provider, &cfg)?;
            fs::create_dir_all(&out)?;
            let mut dump_err = None;
            let mut dumper = |t: &sdt_core::tracker::Tracker, r: &sdt_core::tracker::FrameRecord| {
                if let (Some(dir), Some(maps), None) = (&dump_maps, t.last_maps(), &dump_err) {
                    if let Err(e) = dump_frame_maps(maps, r.frame, dir) {
                        dump_err = Some(e);
                    }
                }
            };
            let observer: Option<&mut FrameObserver> = if dump_maps.is_some() { Some(&mut dumper) } else { None };
            let trace = run_tracker(&ds, &cfg, ablation, provider, observer)?;
            if let Some(e) = dump_err {
                return Err(e);
            }
            trace.write_jsonl(&out.join("trace.jsonl"))?;
            let frozen = trace.records.iter().filter(|r| r.frozen).count();
            println!("{}: {} frames, {} frozen, {} updates", ds.name, trace.records.len(), frozen, trace.update_events());
            if ds.has_full_ground_truth() {
                let scores = evaluate(&trace.records, &ds.ground_truth)?;
                println!(
                    "overlap {:.3}  center error {:.2}  success {:.3}  precision {:.3}",
                    scores.overlap_rate, scores.center_error, scores.success, scores.precision
                );
                write_json(&out.join("report.json"), &EvalReport::new(&trace, scores, &cfg))?;
            }
        }
        Command::Eval { trace, seq_dir } => {
            let records = read_trace(&trace)?;
            let ds = load_sequence(&seq_dir, GroundTruth::Full)?;
            let s = evaluate(&records, &ds.ground_truth)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Prior { seq_dir, frame, config, out } => {
            let cfg = load_config(config.as_deref(), None)?;
            let ds = load_sequence(&seq_dir, GroundTruth::FirstOnly)?;
            if !ds.color {
                return Err(HarnessError::Validation("the prior map needs color frames".into()));
            }
            let r = prior_debug(&ds, frame, &cfg, &out)?;
            println!(
                "frame {}: {} candidates, prior used: {}, center ({:.1}, {:.1}), confidence {:.4}",
                r.frame,
                r.candidates.len(),
                r.decision.used_prior,
                r.decision.center.0,
                r.decision.center.1,
                r.decision.confidence
            );
        }
        Command::Synth { spec, out_dir } => {
            let text = fs::read_to_string(&spec).map_err(|e| HarnessError::file(&spec, e.to_string()))?;
            let spec: SyntheticSpec = serde_json::from_str(&text).map_err(|e| HarnessError::file(&spec, e.to_string()))?;
            let ds = synthesize(&spec)?;
            ds.write(&out_dir)?;
            println!("wrote {} frames to {}", ds.len(), out_dir.display());
        }
        Command::Selftest => {
            let results = selftest::run_all();
            for r in &results {
                println!("[{}] {} ({:.1}s): {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.seconds, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(HarnessError::Validation(format!("{failed} self-check(s) failed")));
            }
        }
        Command::Bench { root, config, ablation, threads, provider } => {
            let cfg = load_config(config.as_deref(), None)?;
            let provider = make_provider(&provider, &cfg)?;
            let mut dirs: Vec<PathBuf> =
                fs::read_dir(&root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("img").is_dir()).collect();
            dirs.sort();
            let datasets = dirs.iter().map(|d| load_sequence(d, GroundTruth::Full)).collect::<Result<Vec<_>>>()?;
            let mut failures = 0;
            for (name, report) in run_benchmark(&datasets, &cfg, ablation, provider, threads) {
                match report {
                    Ok(r) => println!(
                        "{name:<24} overlap {:.3}  success {:.3}  precision {:.3}  updates {}",
                        r.scores.overlap_rate, r.scores.success, r.scores.precision, r.update_events
                    ),
                    Err(e) => {
                        failures += 1;
                        println!("{name:<24} error: {e}");
                    }
                }
            }
            if failures > 0 {
                return Err(HarnessError::Validation(format!("{failures} sequence(s) failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
