//! Declarative run configuration and the stage runner.
//!
//! A run directory holds one subdirectory per stage. Stages communicate only
//! through the files they persist, so any stage can be rerun on its own. Every
//! artifact gets a `<file>.meta.json` sidecar carrying the configuration hash,
//! and a full run ends with `run_manifest.json` listing the SHA-256 of every
//! file in the run directory.
//!
//! Classes are grouped into experiments (`class_id % experiments.count`). Each
//! experiment is one synthetic trace with its own blockade histogram, whose
//! fitted peaks are mapped to the experiment's classes in order of depth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compress::{prune_global_l1, prune_sweep, prune_sweep_csv, quantize_static};
use crate::error::{config_err, input_err, Error, Result};
use crate::eval::{
    class_histogram, compute_metrics, confusion, confusion_csv, confusion_pgm, metrics_csv, occlusion_saliency,
    saliency_pgm, MetricReport,
};
use crate::events::{detect_events_f64, events_to_jsonl, events_to_npev, match_against_truth, read_events, DetectorConfig, Event};
use crate::labeling::{
    fit_voigt_peaks_with, freedman_diaconis_bins, histogram_from_values, label_values, stratified_split, AmbiguityPolicy,
    FitOptions, FitResult, Label, LabelCounts, LabeledEvent, Split,
};
use crate::nnet::{
    checkpoint_bytes, knn_predict, parse_checkpoint, pooled_features, porenet_s, predict, train, Dataset, Model, TrainConfig,
};
use crate::rng::{derive_seed, rng_from_seed, stage_seed, Stage};
use crate::scaleogram::{compute_stats, standardize, PixelStats, Scaleogram, ScaleogramConfig};
use crate::synthdata::{annotations_from_json, annotations_to_json, auto_class_table_with, generate_trace, ClassSignature, GroundTruthEvent, SynthConfig, Trace};
use crate::wavelets::{dwt_denoise, Signal};

/// The bundled small demo configuration.
pub const DEMO_CONFIG: &str = include_str!("../configs/demo.toml");
/// The 42-class configuration used for the end-to-end accuracy target.
pub const SYNTH42_CONFIG: &str = include_str!("../configs/synth42.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentsConfig {
    /// Number of traces; class `c` is recorded in experiment `c % count`.
    pub count: usize,
}

impl Default for ExperimentsConfig {
    fn default() -> Self {
        Self { count: 1 }
    }
}

/// Hard-threshold DWT pre-filter applied to the raw trace before detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    pub enabled: bool,
    pub threshold: f64,
    pub levels: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            threshold: 0.5,
            levels: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    /// Histogram bins; 0 selects the Freedman-Diaconis rule.
    pub n_bins: usize,
    pub ambiguity_policy: AmbiguityPolicy,
    pub fit: FitOptions,
    /// Train, validation, test.
    pub split_ratios: [f64; 3],
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            n_bins: 256,
            ambiguity_policy: AmbiguityPolicy::default(),
            fit: FitOptions::default(),
            split_ratios: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressConfig {
    pub prune_fractions: Vec<f64>,
    pub quantize: bool,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            prune_fractions: (0..=10).map(|i| i as f64 / 10.0).collect(),
            quantize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub knn_k: usize,
    /// Occlusion patch `[height, width]` in pixels.
    pub saliency_patch: [usize; 2],
    pub saliency_stride: usize,
    /// Open-pore slices averaged into the occlusion fill image.
    pub openpore_slices: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            knn_k: 5,
            saliency_patch: [8, 8],
            saliency_stride: 4,
            openpore_slices: 64,
        }
    }
}

/// Full run configuration. Seeds inside sections (`synth.rng_seed`,
/// `train.seed`) are replaced by values derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub synth: SynthConfig,
    pub experiments: ExperimentsConfig,
    pub denoise: DenoiseConfig,
    pub detector: DetectorConfig,
    pub labeling: LabelingConfig,
    pub scaleogram: ScaleogramConfig,
    pub train: TrainConfig,
    pub compress: CompressConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            synth: SynthConfig::default(),
            experiments: ExperimentsConfig::default(),
            denoise: DenoiseConfig::default(),
            detector: DetectorConfig::default(),
            labeling: LabelingConfig::default(),
            scaleogram: ScaleogramConfig::default(),
            train: TrainConfig::default(),
            compress: CompressConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| missing_or_io(e, path))?;
        Self::from_toml(&text)
    }

    pub fn demo() -> Self {
        Self::from_toml(DEMO_CONFIG).expect("bundled demo config parses")
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.synth;
        s.validate()?;
        if s.classes.is_some() || !s.forced_events.is_empty() {
            return Err(config_err("synth.classes and synth.forced_events are set per experiment by the pipeline"));
        }
        if !(s.event_rate_hz > 0.0) {
            return Err(config_err("synth.event_rate_hz must be positive"));
        }
        if self.experiments.count == 0 || self.experiments.count > s.n_classes {
            return Err(config_err("experiments.count must lie in [1, n_classes]"));
        }
        if self.denoise.enabled {
            if !(self.denoise.threshold >= 0.0) || self.denoise.levels == 0 {
                return Err(config_err("denoise needs threshold >= 0 and levels >= 1"));
            }
            if self.denoise.levels >= 63 || (1usize << self.denoise.levels) > s.n_samples() {
                return Err(config_err("trace too short for the requested denoise levels"));
            }
        }
        self.detector.validate()?;
        if s.min_gap_samples < 2 * self.detector.baseline_window_samples {
            return Err(config_err(
                "synth.min_gap_samples must be at least twice detector.baseline_window_samples",
            ));
        }
        if s.n_samples() <= self.detector.baseline_window_samples {
            return Err(config_err("trace is shorter than one baseline window"));
        }
        let l = &self.labeling;
        if l.n_bins != 0 && l.n_bins < 8 {
            return Err(config_err("labeling.n_bins must be 0 (automatic) or at least 8"));
        }
        if l.split_ratios.iter().any(|&r| !(r > 0.0)) || (l.split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err("labeling.split_ratios must be positive and sum to 1"));
        }
        self.scaleogram.validate()?;
        if self.scaleogram.height < 8 || self.scaleogram.width < 8 {
            return Err(config_err("scaleograms must be at least 8x8 for the classifier"));
        }
        self.train.validate()?;
        let f = &self.compress.prune_fractions;
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || f.windows(2).any(|w| w[1] < w[0]) {
            return Err(config_err("compress.prune_fractions must be ascending values in [0, 1]"));
        }
        let e = &self.eval;
        if e.knn_k == 0 || e.knn_k % 2 == 0 {
            return Err(config_err("eval.knn_k must be odd"));
        }
        let [ph, pw] = e.saliency_patch;
        if ph == 0 || pw == 0 || ph > self.scaleogram.height || pw > self.scaleogram.width || e.saliency_stride == 0 {
            return Err(config_err("eval.saliency_patch must fit the image and saliency_stride be positive"));
        }
        if e.openpore_slices == 0 {
            return Err(config_err("eval.openpore_slices must be positive"));
        }
        Ok(())
    }

    /// The configuration with `output_dir` cleared: where a run is written
    /// does not change what it computes.
    pub fn hashable(&self) -> Self {
        Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        }
    }

    /// SHA-256 of the JSON form of [`Self::hashable`].
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(&self.hashable())?))
    }

    /// Classes of each experiment, in class-id order.
    pub fn experiment_classes(&self) -> Vec<Vec<u32>> {
        let n = self.experiments.count;
        (0..n)
            .map(|k| (0..self.synth.n_classes as u32).filter(|c| *c as usize % n == k).collect())
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn missing_or_io(e: std::io::Error, path: &Path) -> Error {
    if e.kind() == ErrorKind::NotFound {
        Error::MissingInput(path.display().to_string())
    } else {
        Error::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Synth,
    Detect,
    Label,
    Scaleogram,
    Split,
    Train,
    Eval,
    Prune,
    Quantize,
    Saliency,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 10] = [
        Self::Synth,
        Self::Detect,
        Self::Label,
        Self::Scaleogram,
        Self::Split,
        Self::Train,
        Self::Eval,
        Self::Prune,
        Self::Quantize,
        Self::Saliency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::Detect => "detect",
            Self::Label => "label",
            Self::Scaleogram => "scaleogram",
            Self::Split => "split",
            Self::Train => "train",
            Self::Eval => "eval",
            Self::Prune => "prune",
            Self::Quantize => "quantize",
            Self::Saliency => "saliency",
        }
    }
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| input_err(format!("unknown stage {s:?}")))
    }
}

/// Sidecar written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub stage: String,
    pub config_hash: String,
    pub version: String,
    pub sha256: String,
}

/// One line of the labeled dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub event_id: u64,
    pub source_trace: String,
    pub start_sample: u64,
    pub end_sample: u64,
    pub label: Label,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, serde_json::Value>,
    /// Relative path to SHA-256, for every file of the run except this manifest.
    pub artifacts: BTreeMap<String, String>,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Global event ids carry the experiment index in the upper 32 bits.
pub fn global_event_id(experiment: usize, local: u64) -> u64 {
    ((experiment as u64) << 32) | local
}

fn trace_name(k: usize) -> String {
    format!("synth/trace_{k:02}.nptr")
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<T>> {
    bytes
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| Ok(serde_json::from_slice(l)?))
        .collect()
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

fn metrics_json(r: &MetricReport) -> serde_json::Value {
    serde_json::json!({"macro": r.macro_acc, "micro": r.micro_acc, "top10": r.top10})
}

/// Class id for each detected event, from the ground-truth span it overlaps
/// with IoU >= 0.5.
fn truth_classes(events: &[Event], truth: &[GroundTruthEvent]) -> BTreeMap<u64, u32> {
    let mut out = BTreeMap::new();
    let mut j = 0;
    for e in events {
        while j < truth.len() && truth[j].end_sample <= e.start_sample {
            j += 1;
        }
        for t in truth[j..].iter().take_while(|t| t.start_sample < e.end_sample) {
            let inter = t.end_sample.min(e.end_sample) - t.start_sample.max(e.start_sample);
            let union = t.end_sample.max(e.end_sample) - t.start_sample.min(e.start_sample);
            if 2 * inter >= union {
                out.insert(e.id, t.class_id);
                break;
            }
        }
    }
    out
}

/// Runs stages of one configuration inside its output directory.
pub struct Pipeline {
    cfg: PipelineConfig,
    dir: PathBuf,
    config_hash: String,
}

/// Standardized images of one split, with their event ids.
struct SplitData {
    data: Dataset,
    ids: Vec<u64>,
}

impl Pipeline {
    /// Validates the whole configuration before any work starts.
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let config_hash = cfg.hash()?;
        let dir = cfg.output_dir.clone();
        Ok(Self { cfg, dir, config_hash })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn read(&self, rel: &str) -> Result<Vec<u8>> {
        let p = self.path(rel);
        fs::read(&p).map_err(|e| missing_or_io(e, &p))
    }

    fn write(&self, stage: PipelineStage, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, bytes)?;
        let meta = ArtifactMeta {
            stage: stage.name().to_string(),
            config_hash: self.config_hash.clone(),
            version: VERSION.to_string(),
            sha256: sha256_hex(bytes),
        };
        fs::write(self.path(&format!("{rel}.meta.json")), pretty(&meta)?)?;
        Ok(())
    }

    /// Runs every stage in order and writes the run manifest.
    pub fn run_all(&self) -> Result<RunManifest> {
        fs::create_dir_all(&self.dir)?;
        let _ = fs::remove_file(self.path(RUN_MANIFEST));
        let mut stages = BTreeMap::new();
        for st in PipelineStage::ALL {
            let summary = self.run_stage(st)?;
            stages.insert(st.name().to_string(), summary);
        }
        fs::write(self.path("config.json"), pretty(&self.cfg.hashable())?)?;
        let manifest = RunManifest {
            version: VERSION.to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.cfg.seed,
            stages,
            artifacts: hash_tree(&self.dir)?,
        };
        fs::write(self.path(RUN_MANIFEST), pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Runs one stage from the persisted outputs of earlier stages and returns
    /// its summary.
    pub fn run_stage(&self, stage: PipelineStage) -> Result<serde_json::Value> {
        let summary = match stage {
            PipelineStage::Synth => self.stage_synth()?,
            PipelineStage::Detect => self.stage_detect()?,
            PipelineStage::Label => self.stage_label()?,
            PipelineStage::Scaleogram => self.stage_scaleogram()?,
            PipelineStage::Split => self.stage_split()?,
            PipelineStage::Train => self.stage_train()?,
            PipelineStage::Eval => self.stage_eval()?,
            PipelineStage::Prune => self.stage_prune()?,
            PipelineStage::Quantize => self.stage_quantize()?,
            PipelineStage::Saliency => self.stage_saliency()?,
        };
        self.write(stage, &format!("{stage}/summary.json"), &pretty(&summary)?)?;
        Ok(summary)
    }

    fn class_table(&self) -> Result<Vec<ClassSignature>> {
        match &self.cfg.synth.class_table {
            Some(t) => Ok(t.clone()),
            None => auto_class_table_with(
                self.cfg.synth.n_classes,
                stage_seed(self.cfg.seed, Stage::ClassTable),
                &self.cfg.synth.class_params,
            ),
        }
    }

    fn stage_synth(&self) -> Result<serde_json::Value> {
        let table = self.class_table()?;
        self.write(PipelineStage::Synth, "synth/class_table.json", &pretty(&table)?)?;
        let base_seed = stage_seed(self.cfg.seed, Stage::Synth);
        let groups = self.cfg.experiment_classes();
        let traces: Vec<Result<(Trace, Vec<GroundTruthEvent>)>> = groups
            .par_iter()
            .enumerate()
            .map(|(k, classes)| {
                let sc = SynthConfig {
                    classes: Some(classes.clone()),
                    class_table: Some(table.clone()),
                    rng_seed: derive_seed(base_seed, k as u64 + 1),
                    ..self.cfg.synth.clone()
                };
                generate_trace(&sc)
            })
            .collect();
        let mut experiments = Vec::new();
        for (k, r) in traces.into_iter().enumerate() {
            let (trace, truth) = r?;
            self.write(PipelineStage::Synth, &trace_name(k), &trace.to_bytes())?;
            self.write(PipelineStage::Synth, &format!("synth/truth_{k:02}.json"), &annotations_to_json(&truth)?)?;
            experiments.push(serde_json::json!({
                "experiment": k,
                "classes": groups[k],
                "n_samples": trace.len(),
                "n_events": truth.len(),
            }));
        }
        Ok(serde_json::json!({ "experiments": experiments }))
    }

    /// The trace after the optional DWT pre-filter.
    fn prefiltered(&self, k: usize) -> Result<(Vec<f64>, f64)> {
        let trace = Trace::from_bytes(&self.read(&trace_name(k))?)?;
        let fs_hz = trace.sample_rate_hz;
        let sig = Signal::from_f32(&trace.samples, fs_hz)?;
        let d = &self.cfg.denoise;
        let samples = if d.enabled {
            dwt_denoise(&sig, d.threshold, d.levels)?.samples
        } else {
            sig.samples
        };
        Ok((samples, fs_hz))
    }

    fn load_events(&self, k: usize) -> Result<Vec<Event>> {
        read_events(
            &self.read(&format!("detect/events_{k:02}.jsonl"))?,
            &self.read(&format!("detect/events_{k:02}.npev"))?,
        )
    }

    fn load_truth(&self, k: usize) -> Result<Vec<GroundTruthEvent>> {
        annotations_from_json(&self.read(&format!("synth/truth_{k:02}.json"))?)
    }

    fn stage_detect(&self) -> Result<serde_json::Value> {
        let n = self.cfg.experiments.count;
        let detected: Vec<Result<Vec<Event>>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let (samples, fs_hz) = self.prefiltered(k)?;
                let mut events = detect_events_f64(&samples, fs_hz, &self.cfg.detector)?;
                for e in &mut events {
                    e.id = global_event_id(k, e.id);
                }
                Ok(events)
            })
            .collect();
        let mut reports = Vec::new();
        for (k, r) in detected.into_iter().enumerate() {
            let events = r?;
            self.write(PipelineStage::Detect, &format!("detect/events_{k:02}.jsonl"), &events_to_jsonl(&events)?)?;
            self.write(PipelineStage::Detect, &format!("detect/events_{k:02}.npev"), &events_to_npev(&events))?;
            let truth = self.load_truth(k)?;
            let (precision, recall) = match_against_truth(&events, &truth, 0.5)?;
            reports.push(serde_json::json!({
                "experiment": k,
                "n_events": events.len(),
                "n_truth": truth.len(),
                "precision": precision,
                "recall": recall,
            }));
        }
        Ok(serde_json::json!({ "experiments": reports }))
    }

    fn stage_label(&self) -> Result<serde_json::Value> {
        let table: Vec<ClassSignature> = serde_json::from_slice(&self.read("synth/class_table.json")?)?;
        let lc = &self.cfg.labeling;
        let mut records = Vec::new();
        let mut fits = Vec::new();
        let mut class_map = Vec::new();
        for (k, classes) in self.cfg.experiment_classes().into_iter().enumerate() {
            let events = self.load_events(k)?;
            let values: Vec<(u64, f64)> = events.iter().map(|e| (e.id, e.mean_rel_blockade)).collect();
            let depths: Vec<f64> = values.iter().map(|v| v.1).collect();
            let n_bins = if lc.n_bins == 0 { freedman_diaconis_bins(&depths) } else { lc.n_bins };
            let hist = histogram_from_values(&depths, n_bins)?;
            let fit: FitResult = fit_voigt_peaks_with(&hist, classes.len(), None, &lc.fit)?;
            let mut by_depth = classes.clone();
            by_depth.sort_by(|a, b| {
                table[*a as usize]
                    .mean_rel_blockade
                    .total_cmp(&table[*b as usize].mean_rel_blockade)
                    .then(a.cmp(b))
            });
            for (p, peak) in fit.peaks.iter().enumerate() {
                class_map.push(serde_json::json!({
                    "experiment": k,
                    "peak_id": p,
                    "class_id": by_depth[p],
                    "center": peak.center,
                    "fwhm": peak.fwhm,
                }));
            }
            let (labeled, counts): (Vec<LabeledEvent>, LabelCounts) =
                label_values(&values, &fit.peaks, lc.ambiguity_policy)?;
            let truth = truth_classes(&events, &self.load_truth(k)?);
            let (mut agree, mut compared) = (0usize, 0usize);
            for (ev, le) in events.iter().zip(&labeled) {
                let label = match le.label {
                    Label::Class(p) => Label::Class(by_depth[p as usize]),
                    other => other,
                };
                if let (Label::Class(c), Some(&t)) = (label, truth.get(&ev.id)) {
                    compared += 1;
                    agree += usize::from(c == t);
                }
                records.push(ManifestRecord {
                    event_id: ev.id,
                    source_trace: trace_name(k),
                    start_sample: ev.start_sample,
                    end_sample: ev.end_sample,
                    label,
                    split: None,
                });
            }
            fits.push(serde_json::json!({
                "experiment": k,
                "n_bins": n_bins,
                "fit": fit,
                "counts": counts,
                "label_agreement_with_truth": if compared > 0 { agree as f64 / compared as f64 } else { 1.0 },
            }));
        }
        self.write(PipelineStage::Label, "label/labels.jsonl", &to_jsonl(&records)?)?;
        self.write(PipelineStage::Label, "label/class_map.json", &pretty(&class_map)?)?;
        Ok(serde_json::json!({ "experiments": fits }))
    }

    fn load_records(&self, rel: &str) -> Result<Vec<ManifestRecord>> {
        parse_jsonl(&self.read(rel)?)
    }

    fn stage_scaleogram(&self) -> Result<serde_json::Value> {
        let records = self.load_records("label/labels.jsonl")?;
        let wanted: BTreeSet<u64> = records.iter().filter(|r| r.label.class().is_some()).map(|r| r.event_id).collect();
        let mut selected = Vec::new();
        let mut skipped_short = Vec::new();
        for k in 0..self.cfg.experiments.count {
            for e in self.load_events(k)? {
                if !wanted.contains(&e.id) {
                    continue;
                }
                if e.rel_samples.len() < 8 {
                    skipped_short.push(e.id);
                } else {
                    selected.push(e);
                }
            }
        }
        selected.sort_by_key(|e| e.id);
        let images = self.cfg.scaleogram.build_all(&selected)?;
        let mut bytes = Vec::with_capacity(images.len() * (24 + 4 * self.cfg.scaleogram.height * self.cfg.scaleogram.width));
        for s in &images {
            bytes.extend_from_slice(&s.to_bytes());
        }
        self.write(PipelineStage::Scaleogram, "scaleogram/scaleograms.npsg", &bytes)?;
        let index = serde_json::json!({
            "grid_id": self.cfg.scaleogram.grid_id(),
            "height": self.cfg.scaleogram.height,
            "width": self.cfg.scaleogram.width,
            "event_ids": images.iter().map(|s| s.event_id).collect::<Vec<_>>(),
        });
        self.write(PipelineStage::Scaleogram, "scaleogram/index.json", &pretty(&index)?)?;
        Ok(serde_json::json!({
            "n_scaleograms": images.len(),
            "skipped_short": skipped_short,
            "grid_id": self.cfg.scaleogram.grid_id(),
        }))
    }

    fn stage_split(&self) -> Result<serde_json::Value> {
        let records = self.load_records("label/labels.jsonl")?;
        let index: serde_json::Value = serde_json::from_slice(&self.read("scaleogram/index.json")?)?;
        let have: BTreeSet<u64> = serde_json::from_value(index["event_ids"].clone())?;
        let mut usable: Vec<ManifestRecord> = records
            .into_iter()
            .filter(|r| r.label.class().is_some() && have.contains(&r.event_id))
            .collect();
        usable.sort_by_key(|r| r.event_id);
        let labeled: Vec<LabeledEvent> = usable
            .iter()
            .map(|r| LabeledEvent {
                event_id: r.event_id,
                mean_rel_blockade: f64::NAN,
                label: r.label,
                peak_id: None,
            })
            .collect();
        let [a, b, c] = self.cfg.labeling.split_ratios;
        let assignment = stratified_split(&labeled, (a, b, c), stage_seed(self.cfg.seed, Stage::Split))?;
        let map = assignment.as_map();
        let mut per_class: BTreeMap<u32, [usize; 3]> = BTreeMap::new();
        for r in &mut usable {
            let s = map[&r.event_id];
            r.split = Some(s);
            let slot = match s {
                Split::Train => 0,
                Split::Validation => 1,
                Split::Test => 2,
            };
            per_class.entry(r.label.class().unwrap()).or_default()[slot] += 1;
        }
        self.write(PipelineStage::Split, "split/manifest.jsonl", &to_jsonl(&usable)?)?;
        let totals = per_class.values().fold([0usize; 3], |acc, v| [acc[0] + v[0], acc[1] + v[1], acc[2] + v[2]]);
        Ok(serde_json::json!({
            "train": totals[0],
            "validation": totals[1],
            "test": totals[2],
            "per_class": per_class,
        }))
    }

    fn manifest(&self) -> Result<Vec<ManifestRecord>> {
        self.load_records("split/manifest.jsonl")
    }

    /// Streams the scaleogram file, calling `f` for every record whose id is in `ids`.
    fn for_each_scaleogram(&self, ids: &BTreeSet<u64>, mut f: impl FnMut(Scaleogram)) -> Result<()> {
        let bytes = self.read("scaleogram/scaleograms.npsg")?;
        let mut r = bytes.as_slice();
        while !r.is_empty() {
            let s = Scaleogram::read_from(&mut r)?;
            if ids.contains(&s.event_id) {
                f(s);
            }
        }
        Ok(())
    }

    fn split_ids(manifest: &[ManifestRecord], split: Split) -> BTreeSet<u64> {
        manifest.iter().filter(|r| r.split == Some(split)).map(|r| r.event_id).collect()
    }

    fn load_split(&self, manifest: &[ManifestRecord], split: Split, stats: &PixelStats) -> Result<SplitData> {
        let labels: BTreeMap<u64, usize> = manifest
            .iter()
            .filter(|r| r.split == Some(split))
            .map(|r| (r.event_id, r.label.class().unwrap() as usize))
            .collect();
        let ids: BTreeSet<u64> = labels.keys().copied().collect();
        let (h, w) = (self.cfg.scaleogram.height, self.cfg.scaleogram.width);
        let mut images = Vec::with_capacity(ids.len() * h * w);
        let mut got = Vec::with_capacity(ids.len());
        self.for_each_scaleogram(&ids, |s| {
            images.extend(standardize(&s, stats).pixels);
            got.push(s.event_id);
        })?;
        if got.len() != ids.len() {
            return Err(Error::MissingInput(format!(
                "{} of {} scaleograms of the {split:?} split",
                ids.len() - got.len(),
                ids.len()
            )));
        }
        let lab = got.iter().map(|id| labels[id]).collect();
        Ok(SplitData {
            data: Dataset::new(images, lab, h, w)?,
            ids: got,
        })
    }

    fn read_stats(&self) -> Result<PixelStats> {
        Ok(serde_json::from_slice(&self.read("train/stats.json")?)?)
    }

    fn load_model(&self) -> Result<Model<f32>> {
        Ok(parse_checkpoint(&self.read("train/checkpoint.npck")?)?.0)
    }

    fn stage_train(&self) -> Result<serde_json::Value> {
        let manifest = self.manifest()?;
        let train_ids = Self::split_ids(&manifest, Split::Train);
        let mut train_images = Vec::with_capacity(train_ids.len());
        self.for_each_scaleogram(&train_ids, |s| train_images.push(s))?;
        let stats = compute_stats(&train_images, "TRAIN")?;
        drop(train_images);
        self.write(PipelineStage::Train, "train/stats.json", &pretty(&stats)?)?;
        let tr = self.load_split(&manifest, Split::Train, &stats)?;
        let va = self.load_split(&manifest, Split::Validation, &stats)?;
        let seed = stage_seed(self.cfg.seed, Stage::Train);
        let (h, w) = (self.cfg.scaleogram.height, self.cfg.scaleogram.width);
        let mut model = Model::new(porenet_s(self.cfg.synth.n_classes, h, w), derive_seed(seed, 1))?;
        let tc = TrainConfig {
            seed: derive_seed(seed, 2),
            ..self.cfg.train.clone()
        };
        let outcome = train(&mut model, &tr.data, Some(&va.data), &tc)?;
        let meta = serde_json::json!({
            "config_hash": self.config_hash,
            "epochs": tc.epochs,
            "swa_snapshots": outcome.swa_snapshots,
            "n_train": tr.data.len(),
            "n_validation": va.data.len(),
        });
        self.write(PipelineStage::Train, "train/checkpoint.npck", &checkpoint_bytes(&model, meta)?)?;
        self.write(PipelineStage::Train, "train/log.csv", outcome.log_csv().as_bytes())?;
        let last = outcome.log.last();
        Ok(serde_json::json!({
            "n_train": tr.data.len(),
            "n_validation": va.data.len(),
            "params": model.param_count(),
            "final_train_loss": last.map(|e| e.train_loss),
            "final_val_macro": last.and_then(|e| e.val_macro),
            "swa_snapshots": outcome.swa_snapshots,
        }))
    }

    fn stage_eval(&self) -> Result<serde_json::Value> {
        let manifest = self.manifest()?;
        let stats = self.read_stats()?;
        let model = self.load_model()?;
        let c = model.n_classes();
        let tr = self.load_split(&manifest, Split::Train, &stats)?;
        let te = self.load_split(&manifest, Split::Test, &stats)?;
        let pred = predict(&model, &te.data)?;
        let report = compute_metrics(&te.data.labels, &pred, c)?;
        let cm = confusion(&te.data.labels, &pred, c)?;
        let (h, w) = (te.data.height, te.data.width);
        let feats = |d: &Dataset| (0..d.len()).map(|i| pooled_features(d.image(i), h, w)).collect::<Vec<_>>();
        let knn_pred = knn_predict(&feats(&tr.data), &tr.data.labels, &feats(&te.data), self.cfg.eval.knn_k)?;
        let knn = compute_metrics(&te.data.labels, &knn_pred, c)?;
        let st = PipelineStage::Eval;
        self.write(st, "eval/metrics.csv", metrics_csv(&report).as_bytes())?;
        self.write(st, "eval/knn_metrics.csv", metrics_csv(&knn).as_bytes())?;
        self.write(st, "eval/confusion.csv", confusion_csv(&cm).as_bytes())?;
        self.write(st, "eval/confusion.pgm", &confusion_pgm(&cm))?;
        let mut hist = String::from("class,n_test\n");
        for (k, v) in class_histogram(&te.data.labels) {
            hist.push_str(&format!("{k},{v}\n"));
        }
        self.write(st, "eval/class_histogram.csv", hist.as_bytes())?;
        let mut preds = String::from("event_id,label,predicted,knn_predicted\n");
        for (i, id) in te.ids.iter().enumerate() {
            preds.push_str(&format!("{id},{},{},{}\n", te.data.labels[i], pred[i], knn_pred[i]));
        }
        self.write(st, "eval/predictions.csv", preds.as_bytes())?;
        Ok(serde_json::json!({
            "n_test": te.data.len(),
            "model": metrics_json(&report),
            "knn": metrics_json(&knn),
            "notes": report.notes,
        }))
    }

    fn stage_prune(&self) -> Result<serde_json::Value> {
        let manifest = self.manifest()?;
        let stats = self.read_stats()?;
        let model = self.load_model()?;
        let te = self.load_split(&manifest, Split::Test, &stats)?;
        let fractions = &self.cfg.compress.prune_fractions;
        let reports = prune_sweep(&model, fractions, &te.data)?;
        self.write(PipelineStage::Prune, "prune/prune_sweep.csv", prune_sweep_csv(&reports).as_bytes())?;
        let mut masks = Vec::new();
        for &f in fractions {
            masks.extend(prune_global_l1(&model, f)?.1.to_json()?);
            masks.push(b'\n');
        }
        self.write(PipelineStage::Prune, "prune/masks.jsonl", &masks)?;
        Ok(serde_json::json!({
            "fractions": fractions,
            "macro": reports.iter().map(|r| r.macro_acc).collect::<Vec<_>>(),
            "micro": reports.iter().map(|r| r.micro_acc).collect::<Vec<_>>(),
        }))
    }

    fn stage_quantize(&self) -> Result<serde_json::Value> {
        if !self.cfg.compress.quantize {
            return Ok(serde_json::json!({ "skipped": true }));
        }
        let manifest = self.manifest()?;
        let stats = self.read_stats()?;
        let model = self.load_model()?;
        let va = self.load_split(&manifest, Split::Validation, &stats)?;
        let calib = if va.data.is_empty() {
            self.load_split(&manifest, Split::Train, &stats)?
        } else {
            va
        };
        let q = quantize_static(&model, &calib.data)?;
        let te = self.load_split(&manifest, Split::Test, &stats)?;
        let c = model.n_classes();
        let f32_report = compute_metrics(&te.data.labels, &predict(&model, &te.data)?, c)?;
        let q_report = compute_metrics(&te.data.labels, &q.predict(&te.data)?, c)?;
        self.write(PipelineStage::Quantize, "quantize/quantized.npqm", &q.to_bytes()?)?;
        let size = q.size_report(&model)?;
        let constant_sites: Vec<usize> = q.sites.iter().filter(|s| s.constant).map(|s| s.layer).collect();
        let summary = serde_json::json!({
            "size": size,
            "f32": metrics_json(&f32_report),
            "int8": metrics_json(&q_report),
            "calibration_images": calib.data.len(),
            "constant_sites": constant_sites,
        });
        self.write(PipelineStage::Quantize, "quantize/report.json", &pretty(&summary)?)?;
        Ok(summary)
    }

    /// Mean standardized scaleogram of open-pore slices whose lengths follow
    /// the detected dwell distribution.
    fn openpore_fill(&self, stats: &PixelStats) -> Result<Scaleogram> {
        let (samples, fs_hz) = self.prefiltered(0)?;
        let events = self.load_events(0)?;
        if events.is_empty() {
            return Err(input_err("experiment 0 has no events to draw open-pore slice lengths from"));
        }
        let margin = self.cfg.detector.baseline_window_samples / 4;
        let mut gaps = Vec::new();
        let mut prev = 0usize;
        for e in &events {
            let (s, t) = (e.start_sample as usize, e.end_sample as usize);
            if s > prev + 2 * margin {
                gaps.push((prev + margin, s - margin));
            }
            prev = t;
        }
        if samples.len() > prev + 2 * margin {
            gaps.push((prev + margin, samples.len() - margin));
        }
        let mut rng = rng_from_seed(stage_seed(self.cfg.seed, Stage::Saliency));
        let (h, w) = (self.cfg.scaleogram.height, self.cfg.scaleogram.width);
        let mut acc = vec![0.0f64; h * w];
        let n = self.cfg.eval.openpore_slices;
        let mut slices = Vec::with_capacity(n);
        for i in 0..n {
            let len = events[rng.random_range(0..events.len())].len().max(8);
            let fits: Vec<&(usize, usize)> = gaps.iter().filter(|g| g.1 - g.0 >= len).collect();
            if fits.is_empty() {
                return Err(input_err("no open-pore gap is long enough for a baseline slice"));
            }
            let g = fits[rng.random_range(0..fits.len())];
            let start = rng.random_range(g.0..=g.1 - len);
            let raw = samples[start..start + len].to_vec();
            let mean = raw.iter().sum::<f64>() / len as f64;
            slices.push(Event {
                id: i as u64,
                start_sample: start as u64,
                end_sample: (start + len) as u64,
                open_pore_mean: mean,
                dwell_us: len as f64 / fs_hz * 1e6,
                rel_samples: raw.iter().map(|x| x / mean).collect(),
                mean_rel_blockade: 1.0,
                raw_samples: raw,
            });
        }
        for s in self.cfg.scaleogram.build_all(&slices)? {
            for (a, p) in acc.iter_mut().zip(standardize(&s, stats).pixels) {
                *a += p as f64;
            }
        }
        Ok(Scaleogram {
            pixels: acc.iter().map(|a| (a / n as f64) as f32).collect(),
            height: h,
            width: w,
            event_id: u64::MAX,
            grid_id: self.cfg.scaleogram.grid_id(),
        })
    }

    fn stage_saliency(&self) -> Result<serde_json::Value> {
        let manifest = self.manifest()?;
        let stats = self.read_stats()?;
        let model = self.load_model()?;
        let te = self.load_split(&manifest, Split::Test, &stats)?;
        if te.data.is_empty() {
            return Err(input_err("test split is empty"));
        }
        let fill = self.openpore_fill(&stats)?;
        let (h, w) = (te.data.height, te.data.width);
        let class = te.data.labels[0];
        let [ph, pw] = self.cfg.eval.saliency_patch;
        let map = occlusion_saliency(&model, te.data.image(0), h, w, class, (ph, pw), self.cfg.eval.saliency_stride, &fill.pixels)?;
        self.write(PipelineStage::Saliency, "saliency/openpore_fill.npsg", &fill.to_bytes())?;
        self.write(PipelineStage::Saliency, "saliency/saliency.pgm", &saliency_pgm(&map, h, w))?;
        let row_means: Vec<f64> = (0..h).map(|r| map[r * w..(r + 1) * w].iter().map(|&v| v as f64).sum::<f64>() / w as f64).collect();
        let peak_row = row_means
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        Ok(serde_json::json!({
            "event_id": te.ids[0],
            "class": class,
            "max_drop": map.iter().copied().fold(f32::NEG_INFINITY, f32::max),
            "peak_row": peak_row,
        }))
    }
}

/// SHA-256 of every file below `dir` (except the run manifest), keyed by
/// `/`-separated relative path.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, cur: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(cur)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel: Vec<String> = p
                    .strip_prefix(root)
                    .expect("walk stays below root")
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect();
                let rel = rel.join("/");
                if rel != RUN_MANIFEST {
                    out.insert(rel, sha256_hex(&fs::read(&p)?));
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}
