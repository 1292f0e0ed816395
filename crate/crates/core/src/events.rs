//! Streaming statistical blockade-event detection.
//!
//! The detector consumes samples strictly in order. It keeps a trailing
//! window of open-pore samples, from which it periodically re-estimates the
//! baseline mean and noise level. A sample below `mean - k_onset * sigma`
//! opens a candidate event; the event closes when the current recovers above
//! `mean - end_hysteresis_fraction * k_onset * sigma`. Candidates shorter
//! than the minimum dwell are treated as open-pore noise. Accepted events wait
//! for one window of post-event open-pore samples, and are normalized by the
//! average of the pre- and post-event window means.

use std::collections::VecDeque;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};
use crate::synthdata::{read_array, read_u32, GroundTruthEvent, Trace};

pub const EVENTS_MAGIC: &[u8; 4] = b"NPEV";
pub const EVENTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaEstimator {
    /// 1.4826 x median absolute deviation.
    #[default]
    Mad,
    Std,
}

/// What to do with events whose mean current lies below `mean - k_outlier * sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutlierRule {
    /// Keep every event regardless of depth.
    #[default]
    KeepAll,
    /// Discard events deeper than the outlier threshold.
    RejectDeeper,
    /// Discard events that never get past the outlier threshold on average.
    RejectShallower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub baseline_window_samples: usize,
    pub k_onset: f64,
    pub k_outlier: f64,
    pub min_dwell_us: f64,
    pub end_hysteresis_fraction: f64,
    pub sigma_estimator: SigmaEstimator,
    /// Shorthand for `outlier_rule = "reject_deeper"`.
    pub outlier_reject_deeper: bool,
    pub outlier_rule: OutlierRule,
    /// Baseline statistics are re-estimated after this many open-pore samples.
    pub stats_refresh_samples: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            baseline_window_samples: 2048,
            k_onset: 3.0,
            k_outlier: 4.0,
            min_dwell_us: 80.0,
            end_hysteresis_fraction: 0.5,
            sigma_estimator: SigmaEstimator::Mad,
            outlier_reject_deeper: false,
            outlier_rule: OutlierRule::KeepAll,
            stats_refresh_samples: 512,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.baseline_window_samples < 16 {
            return Err(config_err("baseline_window_samples must be at least 16"));
        }
        if !(self.k_onset > 0.0 && self.k_outlier >= self.k_onset) {
            return Err(config_err("thresholds must satisfy k_outlier >= k_onset > 0"));
        }
        if !(self.min_dwell_us >= 0.0) {
            return Err(config_err("min_dwell_us must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.end_hysteresis_fraction) {
            return Err(config_err("end_hysteresis_fraction must lie in [0, 1]"));
        }
        if self.stats_refresh_samples == 0 {
            return Err(config_err("stats_refresh_samples must be positive"));
        }
        Ok(())
    }

    pub fn effective_outlier_rule(&self) -> OutlierRule {
        if self.outlier_reject_deeper {
            OutlierRule::RejectDeeper
        } else {
            self.outlier_rule
        }
    }
}

/// A retained blockade event.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub id: u64,
    pub start_sample: u64,
    pub end_sample: u64,
    pub open_pore_mean: f64,
    pub dwell_us: f64,
    pub raw_samples: Vec<f64>,
    pub rel_samples: Vec<f64>,
    pub mean_rel_blockade: f64,
}

impl Event {
    pub fn len(&self) -> usize {
        (self.end_sample - self.start_sample) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end_sample == self.start_sample
    }
}

#[derive(Debug, Clone, Copy)]
struct Baseline {
    mean: f64,
    sigma: f64,
}

struct Candidate {
    start: u64,
    samples: Vec<f64>,
    at_onset: Baseline,
    pre_mean: f64,
}

struct Pending {
    start: u64,
    samples: Vec<f64>,
    at_onset: Baseline,
    pre_mean: f64,
    post_sum: f64,
    post_count: usize,
}

/// Single-pass detector; feed samples with [`Detector::push_chunk`].
pub struct Detector {
    cfg: DetectorConfig,
    rule: OutlierRule,
    sample_rate_hz: f64,
    window: VecDeque<f64>,
    baseline: Option<Baseline>,
    since_refresh: usize,
    candidate: Option<Candidate>,
    pending: VecDeque<Pending>,
    ready: Vec<Event>,
    index: u64,
    scratch: Vec<f64>,
}

impl Detector {
    pub fn new(cfg: DetectorConfig, sample_rate_hz: f64) -> Result<Self> {
        cfg.validate()?;
        if !(sample_rate_hz > 0.0) {
            return Err(input_err("sample rate must be positive"));
        }
        Ok(Self {
            rule: cfg.effective_outlier_rule(),
            window: VecDeque::with_capacity(cfg.baseline_window_samples),
            cfg,
            sample_rate_hz,
            baseline: None,
            since_refresh: 0,
            candidate: None,
            pending: VecDeque::new(),
            ready: Vec::new(),
            index: 0,
            scratch: Vec::new(),
        })
    }

    pub fn push_chunk(&mut self, chunk: &[f64]) -> Result<()> {
        for &x in chunk {
            self.push(x)?;
        }
        Ok(())
    }

    pub fn push(&mut self, x: f64) -> Result<()> {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("trace sample {}", self.index)));
        }
        let idx = self.index;
        self.index += 1;

        let Some(base) = self.baseline else {
            self.window.push_back(x);
            if self.window.len() == self.cfg.baseline_window_samples {
                self.refresh();
            }
            return Ok(());
        };

        if let Some(cand) = &mut self.candidate {
            let close = cand.at_onset.mean
                - self.cfg.end_hysteresis_fraction * self.cfg.k_onset * cand.at_onset.sigma;
            if x > close {
                let cand = self.candidate.take().unwrap();
                self.close_candidate(cand, idx);
                self.push_open(x);
            } else {
                cand.samples.push(x);
            }
            return Ok(());
        }

        if x < base.mean - self.cfg.k_onset * base.sigma {
            let pre_mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
            self.candidate = Some(Candidate {
                start: idx,
                samples: vec![x],
                at_onset: base,
                pre_mean,
            });
        } else {
            self.push_open(x);
        }
        Ok(())
    }

    fn close_candidate(&mut self, cand: Candidate, end: u64) {
        let dwell_us = (end - cand.start) as f64 / self.sample_rate_hz * 1e6;
        if dwell_us < self.cfg.min_dwell_us {
            // Too short to be an event: the excursion belongs to the open pore.
            for &s in &cand.samples {
                self.push_open(s);
            }
            return;
        }
        while let Some(p) = self.pending.pop_front() {
            self.finalize(p);
        }
        self.pending.push_back(Pending {
            start: cand.start,
            samples: cand.samples,
            at_onset: cand.at_onset,
            pre_mean: cand.pre_mean,
            post_sum: 0.0,
            post_count: 0,
        });
    }

    fn push_open(&mut self, x: f64) {
        if self.window.len() == self.cfg.baseline_window_samples {
            self.window.pop_front();
        }
        self.window.push_back(x);
        let w = self.cfg.baseline_window_samples;
        let mut done = 0;
        for p in self.pending.iter_mut() {
            p.post_sum += x;
            p.post_count += 1;
            if p.post_count == w {
                done += 1;
            }
        }
        for _ in 0..done {
            let p = self.pending.pop_front().unwrap();
            self.finalize(p);
        }
        self.since_refresh += 1;
        if self.since_refresh >= self.cfg.stats_refresh_samples {
            self.refresh();
        }
    }

    fn refresh(&mut self) {
        self.since_refresh = 0;
        let n = self.window.len() as f64;
        let mean = self.window.iter().sum::<f64>() / n;
        let sigma = match self.cfg.sigma_estimator {
            SigmaEstimator::Std => {
                (self.window.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            }
            SigmaEstimator::Mad => {
                self.scratch.clear();
                self.scratch.extend(self.window.iter().copied());
                let med = median_in_place(&mut self.scratch);
                for v in self.scratch.iter_mut() {
                    *v = (*v - med).abs();
                }
                1.4826 * median_in_place(&mut self.scratch)
            }
        };
        self.baseline = Some(Baseline { mean, sigma });
    }

    fn finalize(&mut self, p: Pending) {
        let open_pore_mean = if p.post_count > 0 {
            0.5 * (p.pre_mean + p.post_sum / p.post_count as f64)
        } else {
            p.pre_mean
        };
        let n = p.samples.len();
        let mean_current = p.samples.iter().sum::<f64>() / n as f64;
        let deep = mean_current < p.at_onset.mean - self.cfg.k_outlier * p.at_onset.sigma;
        let keep = match self.rule {
            OutlierRule::KeepAll => true,
            OutlierRule::RejectDeeper => !deep,
            OutlierRule::RejectShallower => deep,
        };
        if !keep || !(open_pore_mean > 0.0) {
            return;
        }
        let rel_samples: Vec<f64> = p.samples.iter().map(|x| x / open_pore_mean).collect();
        let mean_rel_blockade = rel_samples.iter().sum::<f64>() / n as f64;
        if !(mean_rel_blockade > 0.0 && mean_rel_blockade < 1.0) {
            return;
        }
        self.ready.push(Event {
            id: 0,
            start_sample: p.start,
            end_sample: p.start + n as u64,
            open_pore_mean,
            dwell_us: n as f64 / self.sample_rate_hz * 1e6,
            raw_samples: p.samples,
            rel_samples,
            mean_rel_blockade,
        });
    }

    /// Events finalized so far (their post-event window is complete).
    pub fn drain_ready(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.ready)
    }

    /// Flush: pending events are normalized with whatever post-event samples
    /// exist; an event still open at the end of the trace is dropped.
    pub fn finish(mut self) -> Vec<Event> {
        while let Some(p) = self.pending.pop_front() {
            self.finalize(p);
        }
        let mut out = self.ready;
        for (i, e) in out.iter_mut().enumerate() {
            e.id = i as u64;
        }
        out
    }
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Detect events over a whole trace. Event ids are assigned in order from 0.
pub fn detect_events(trace: &Trace, cfg: &DetectorConfig) -> Result<Vec<Event>> {
    let samples: Vec<f64> = trace.samples.iter().map(|&x| x as f64).collect();
    detect_events_f64(&samples, trace.sample_rate_hz, cfg)
}

pub fn detect_events_f64(samples: &[f64], sample_rate_hz: f64, cfg: &DetectorConfig) -> Result<Vec<Event>> {
    cfg.validate()?;
    if samples.len() <= cfg.baseline_window_samples {
        return Err(input_err(format!(
            "trace of {} samples is shorter than one baseline window ({})",
            samples.len(),
            cfg.baseline_window_samples
        )));
    }
    let mut det = Detector::new(cfg.clone(), sample_rate_hz)?;
    det.push_chunk(samples)?;
    Ok(det.finish())
}

fn iou(a: (u64, u64), b: (u64, u64)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = a.1.max(b.1) - a.0.min(b.0);
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy one-to-one matching by interval IoU.
///
/// With no detections precision is reported as 1.0; with no truth events
/// recall is reported as 1.0.
pub fn match_against_truth(
    detected: &[Event],
    truth: &[GroundTruthEvent],
    iou_threshold: f64,
) -> Result<(f64, f64)> {
    let spans: Vec<(u64, u64)> = detected.iter().map(|e| (e.start_sample, e.end_sample)).collect();
    match_spans(&spans, truth, iou_threshold)
}

pub fn match_spans(
    detected: &[(u64, u64)],
    truth: &[GroundTruthEvent],
    iou_threshold: f64,
) -> Result<(f64, f64)> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(input_err("iou_threshold must lie in (0, 1]"));
    }
    let mut used = vec![false; truth.len()];
    let mut matched = 0usize;
    let mut lo = 0usize;
    for &d in detected {
        while lo < truth.len() && truth[lo].end_sample <= d.0 {
            lo += 1;
        }
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in truth.iter().enumerate().skip(lo) {
            if t.start_sample >= d.1 {
                break;
            }
            if used[j] {
                continue;
            }
            let v = iou(d, (t.start_sample, t.end_sample));
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            matched += 1;
        }
    }
    let precision = if detected.is_empty() {
        1.0
    } else {
        matched as f64 / detected.len() as f64
    };
    let recall = if truth.is_empty() {
        1.0
    } else {
        matched as f64 / truth.len() as f64
    };
    Ok((precision, recall))
}

/// Serializable per-event record (everything except the sample arrays).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub id: u64,
    pub start_sample: u64,
    pub end_sample: u64,
    pub open_pore_mean: f64,
    pub dwell_us: f64,
    pub mean_rel_blockade: f64,
}

impl From<&Event> for EventRecord {
    fn from(e: &Event) -> Self {
        Self {
            id: e.id,
            start_sample: e.start_sample,
            end_sample: e.end_sample,
            open_pore_mean: e.open_pore_mean,
            dwell_us: e.dwell_us,
            mean_rel_blockade: e.mean_rel_blockade,
        }
    }
}

pub fn events_to_jsonl(events: &[Event]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for e in events {
        serde_json::to_writer(&mut out, &EventRecord::from(e))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn events_to_npev(events: &[Event]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(EVENTS_MAGIC);
    out.extend_from_slice(&EVENTS_VERSION.to_le_bytes());
    for e in events {
        out.extend_from_slice(&e.id.to_le_bytes());
        out.extend_from_slice(&(e.rel_samples.len() as u64).to_le_bytes());
        for &r in &e.rel_samples {
            out.extend_from_slice(&(r as f32).to_le_bytes());
        }
    }
    out
}

/// Parse the companion binary file into `(id, rel_samples)` pairs.
pub fn parse_npev(bytes: &[u8]) -> Result<Vec<(u64, Vec<f32>)>> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EVENTS_MAGIC {
        return Err(Error::Format {
            what: "event file magic",
            expected: "NPEV".into(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = read_u32(&mut r)?;
    if version != EVENTS_VERSION {
        return Err(Error::Format {
            what: "event file version",
            expected: EVENTS_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let mut out = Vec::new();
    while !r.is_empty() {
        let id = u64::from_le_bytes(read_array(&mut r)?);
        let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
        if r.len() < 4 * n {
            return Err(Error::Format {
                what: "event payload bytes",
                expected: (4 * n).to_string(),
                found: r.len().to_string(),
            });
        }
        let (payload, rest) = r.split_at(4 * n);
        out.push((
            id,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ));
        r = rest;
    }
    Ok(out)
}

/// Reassemble events from the JSON-lines index and the binary sample file.
/// Raw samples are recovered as `rel * open_pore_mean`.
pub fn read_events(jsonl: &[u8], npev: &[u8]) -> Result<Vec<Event>> {
    let samples = parse_npev(npev)?;
    let mut out = Vec::new();
    for (line, (id, rel)) in jsonl
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .zip(samples.iter())
    {
        let rec: EventRecord = serde_json::from_slice(line)?;
        if rec.id != *id {
            return Err(Error::Format {
                what: "event id in binary file",
                expected: rec.id.to_string(),
                found: id.to_string(),
            });
        }
        let rel_samples: Vec<f64> = rel.iter().map(|&r| r as f64).collect();
        out.push(Event {
            id: rec.id,
            start_sample: rec.start_sample,
            end_sample: rec.end_sample,
            open_pore_mean: rec.open_pore_mean,
            dwell_us: rec.dwell_us,
            raw_samples: rel_samples.iter().map(|r| r * rec.open_pore_mean).collect(),
            rel_samples,
            mean_rel_blockade: rec.mean_rel_blockade,
        });
    }
    let n_lines = jsonl.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count();
    if n_lines != samples.len() {
        return Err(Error::Format {
            what: "event count",
            expected: n_lines.to_string(),
            found: samples.len().to_string(),
        });
    }
    Ok(out)
}

pub fn write_events(events: &[Event], jsonl_path: &Path, npev_path: &Path) -> Result<()> {
    fs::File::create(jsonl_path)?.write_all(&events_to_jsonl(events)?)?;
    fs::File::create(npev_path)?.write_all(&events_to_npev(events))?;
    Ok(())
}
