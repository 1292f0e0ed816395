//! `npclass`: runs pipeline stages against a run directory.
//!
//! Every stage subcommand reads its inputs from the run directory written by
//! earlier stages and writes its own outputs there. Failures print a JSON
//! object `{"error": {"kind": ..., "message": ...}}` on stderr and exit with
//! status 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use npclass_core::events::{detect_events_f64, events_to_jsonl, events_to_npev};
use npclass_core::pipeline::{Pipeline, PipelineConfig, PipelineStage};
use npclass_core::synthdata::Trace;
use npclass_core::wavelets::{dwt_denoise, Signal};
use npclass_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "npclass", version, about = "Nanopore blockade-event classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; the bundled demo configuration when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run directory; overrides `output_dir` from the configuration.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Overrides the configuration seed for every stage.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct DetectArgs {
    #[command(flatten)]
    common: Common,
    /// Detect on a single trace file instead of the run directory.
    #[arg(long, requires = "events_out")]
    trace: Option<PathBuf>,
    /// Output prefix for `<prefix>.jsonl` and `<prefix>.npev` with `--trace`.
    #[arg(long, requires = "trace")]
    events_out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one synthetic trace per experiment with ground truth.
    Synth(Common),
    /// Denoise traces and detect blockade events.
    Detect(DetectArgs),
    /// Fit Voigt peaks per experiment and label events by FWHM windows.
    Label(Common),
    /// Build log-magnitude scaleograms of the labeled events.
    Scaleogram(Common),
    /// Stratified train/validation/test split.
    Split(Common),
    /// Train the classifier on the train split.
    Train(Common),
    /// Test-set metrics, confusion matrix and the k-NN baseline.
    Eval(Common),
    /// Global L1 pruning sweep.
    Prune(Common),
    /// Post-training static int8 quantization.
    Quantize(Common),
    /// Occlusion saliency map of one test image.
    Saliency(Common),
    /// Run every stage and write the run manifest.
    Pipeline(Common),
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::demo(),
    };
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn detect_single(cfg: &PipelineConfig, trace: &Path, prefix: &Path) -> Result<serde_json::Value> {
    cfg.validate()?;
    let bytes = std::fs::read(trace).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(trace.display().to_string()),
        _ => Error::Io(e),
    })?;
    let t = Trace::from_bytes(&bytes)?;
    let sig = Signal::from_f32(&t.samples, t.sample_rate_hz)?;
    let samples = if cfg.denoise.enabled {
        dwt_denoise(&sig, cfg.denoise.threshold, cfg.denoise.levels)?.samples
    } else {
        sig.samples
    };
    let events = detect_events_f64(&samples, t.sample_rate_hz, &cfg.detector)?;
    let with_ext = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    if let Some(parent) = prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(with_ext(".jsonl"), events_to_jsonl(&events)?)?;
    std::fs::write(with_ext(".npev"), events_to_npev(&events))?;
    Ok(serde_json::json!({ "n_events": events.len() }))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let (common, stage) = match &cli.command {
        Command::Synth(c) => (c, Some(PipelineStage::Synth)),
        Command::Detect(d) => {
            if let (Some(trace), Some(prefix)) = (&d.trace, &d.events_out) {
                return detect_single(&load_config(&d.common)?, trace, prefix);
            }
            (&d.common, Some(PipelineStage::Detect))
        }
        Command::Label(c) => (c, Some(PipelineStage::Label)),
        Command::Scaleogram(c) => (c, Some(PipelineStage::Scaleogram)),
        Command::Split(c) => (c, Some(PipelineStage::Split)),
        Command::Train(c) => (c, Some(PipelineStage::Train)),
        Command::Eval(c) => (c, Some(PipelineStage::Eval)),
        Command::Prune(c) => (c, Some(PipelineStage::Prune)),
        Command::Quantize(c) => (c, Some(PipelineStage::Quantize)),
        Command::Saliency(c) => (c, Some(PipelineStage::Saliency)),
        Command::Pipeline(c) => (c, None),
    };
    let pipeline = Pipeline::new(load_config(common)?)?;
    match stage {
        Some(st) => pipeline.run_stage(st),
        None => {
            let m = pipeline.run_all()?;
            Ok(serde_json::json!({
                "config_hash": m.config_hash,
                "artifacts": m.artifacts.len(),
                "run_dir": pipeline.dir(),
            }))
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NP_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("NP_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let report = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.to_string() }
            });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
