//! Seeded synthetic nanopore current traces with ground-truth annotations.
//!
//! A trace is Gaussian noise around a slowly drifting open-pore baseline.
//! Each inserted blockade scales the local baseline by a per-event relative
//! depth (drawn as Gaussian + Cauchy, i.e. Voigt-distributed around the class
//! mean) and superimposes a class-specific sinusoidal oscillation.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

pub const TRACE_MAGIC: &[u8; 4] = b"NPTR";
pub const TRACE_VERSION: u32 = 1;

/// A sampled current time series (pA).
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub sample_rate_hz: f64,
    pub samples: Vec<f32>,
}

impl Trace {
    pub fn new(sample_rate_hz: f64, samples: Vec<f32>) -> Self {
        Self {
            sample_rate_hz,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.samples.len());
        out.extend_from_slice(TRACE_MAGIC);
        out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.sample_rate_hz.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TRACE_MAGIC {
            return Err(Error::Format {
                what: "trace magic",
                expected: "NPTR".into(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let version = read_u32(&mut r)?;
        if version != TRACE_VERSION {
            return Err(Error::Format {
                what: "trace version",
                expected: TRACE_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let sample_rate_hz = f64::from_le_bytes(read_array(&mut r)?);
        let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
        if r.len() != 4 * n {
            return Err(Error::Format {
                what: "trace payload bytes",
                expected: (4 * n).to_string(),
                found: r.len().to_string(),
            });
        }
        let samples = r
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self::new(sample_rate_hz, samples))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub(crate) fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

/// Per-class generative signature.
///
/// `osc_amplitude` is relative to the local open-pore current, so the whole
/// event scales with the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSignature {
    pub class_id: u32,
    pub mean_rel_blockade: f64,
    pub blockade_sigma_g: f64,
    pub blockade_gamma_l: f64,
    pub intra_event_osc_freq_hz: f64,
    pub osc_amplitude: f64,
    pub dwell_scale_us: f64,
}

impl ClassSignature {
    fn validate(&self) -> Result<()> {
        if !(self.mean_rel_blockade > 0.0 && self.mean_rel_blockade < 1.0) {
            return Err(config_err(format!(
                "class {}: mean_rel_blockade must lie in (0, 1)",
                self.class_id
            )));
        }
        if self.blockade_sigma_g < 0.0 || self.blockade_gamma_l < 0.0 || self.osc_amplitude < 0.0
        {
            return Err(config_err(format!(
                "class {}: widths and amplitudes must be non-negative",
                self.class_id
            )));
        }
        if self.dwell_scale_us.is_nan() || self.dwell_scale_us <= 0.0 {
            return Err(config_err(format!(
                "class {}: dwell_scale_us must be positive",
                self.class_id
            )));
        }
        Ok(())
    }
}

/// Knobs for [`auto_class_table_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassTableParams {
    pub depth_lo: f64,
    pub depth_hi: f64,
    /// Gaussian depth spread as a fraction of the spacing between adjacent class means.
    pub sigma_fraction: f64,
    /// Lorentzian HWHM as a fraction of the spacing between adjacent class means.
    pub gamma_fraction: f64,
    pub freq_lo_hz: f64,
    pub freq_hi_hz: f64,
    pub n_freq_groups: usize,
    pub amp_lo: f64,
    pub amp_hi: f64,
    pub dwell_scale_us: f64,
}

impl Default for ClassTableParams {
    fn default() -> Self {
        Self {
            depth_lo: 0.2,
            depth_hi: 0.8,
            sigma_fraction: 0.45,
            gamma_fraction: 0.2,
            freq_lo_hz: 8e3,
            freq_hi_hz: 80e3,
            n_freq_groups: 7,
            amp_lo: 0.008,
            amp_hi: 0.08,
            dwell_scale_us: 600.0,
        }
    }
}

pub fn auto_class_table(n_classes: usize, seed: u64) -> Result<Vec<ClassSignature>> {
    auto_class_table_with(n_classes, seed, &ClassTableParams::default())
}

/// Deterministic class table.
///
/// Class means are evenly spaced over `[depth_lo, depth_hi]` (the midpoint for
/// a single class) with widths large enough that adjacent classes overlap.
/// Oscillation frequency and amplitude come from a (frequency group,
/// amplitude level) grid, so every class has a distinct frequency. The seed
/// only adds small jitter to widths, frequencies and dwell scales.
pub fn auto_class_table_with(
    n_classes: usize,
    seed: u64,
    p: &ClassTableParams,
) -> Result<Vec<ClassSignature>> {
    if n_classes == 0 || n_classes > 4096 {
        return Err(config_err("n_classes must lie in [1, 4096]"));
    }
    if !(0.0 < p.depth_lo && p.depth_lo <= p.depth_hi && p.depth_hi < 1.0) {
        return Err(config_err("class depth range must satisfy 0 < lo <= hi < 1"));
    }
    if p.n_freq_groups == 0 || p.freq_lo_hz <= 0.0 || p.freq_hi_hz < p.freq_lo_hz {
        return Err(config_err("invalid oscillation frequency range"));
    }
    let spacing = (p.depth_hi - p.depth_lo) / n_classes as f64;
    let groups = p.n_freq_groups.min(n_classes);
    let levels = n_classes.div_ceil(groups);
    let mut rng = rng_from_seed(derive_seed(seed ^ 0x00C1_A55E, 1));
    let mut table = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let mut jitter = || 1.0 + 0.02 * (rng.random::<f64>() * 2.0 - 1.0);
        let g = c % groups;
        let l = c / groups;
        let g_frac = if groups > 1 { g as f64 / (groups - 1) as f64 } else { 0.0 };
        let l_frac = if levels > 1 { l as f64 / (levels - 1) as f64 } else { 0.0 };
        // Within a frequency group the levels also shift the frequency slightly,
        // which keeps all frequencies distinct.
        let base = p.freq_lo_hz * (p.freq_hi_hz / p.freq_lo_hz).powf(g_frac);
        let freq = base * (1.0 + 0.03 * l as f64 / levels as f64);
        let amp = p.amp_lo * (p.amp_hi / p.amp_lo).powf(l_frac);
        table.push(ClassSignature {
            class_id: c as u32,
            mean_rel_blockade: p.depth_lo + spacing * (c as f64 + 0.5),
            blockade_sigma_g: p.sigma_fraction * spacing * jitter(),
            blockade_gamma_l: p.gamma_fraction * spacing * jitter(),
            intra_event_osc_freq_hz: freq * jitter().powf(0.25),
            osc_amplitude: amp,
            dwell_scale_us: p.dwell_scale_us * jitter(),
        });
    }
    Ok(table)
}

/// An event placed at a fixed position, bypassing the random schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcedEvent {
    pub class_id: u32,
    pub dwell_us: f64,
    pub depth: f64,
    /// Start time; defaults to centering the event in the trace.
    #[serde(default)]
    pub start_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub open_pore_mean: f64,
    pub noise_sigma: f64,
    pub baseline_drift_amplitude: f64,
    pub drift_period_s: f64,
    pub n_classes: usize,
    /// Restrict events to these classes; all classes when absent.
    pub classes: Option<Vec<u32>>,
    pub event_rate_hz: f64,
    /// Lower truncation of the dwell distribution.
    pub min_dwell_us: f64,
    pub max_dwell_us: f64,
    /// Minimum open-pore gap between events and before the first event.
    pub min_gap_samples: usize,
    pub class_table: Option<Vec<ClassSignature>>,
    pub class_params: ClassTableParams,
    pub forced_events: Vec<ForcedEvent>,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 250e3,
            duration_s: 1.0,
            open_pore_mean: 100.0,
            noise_sigma: 1.0,
            baseline_drift_amplitude: 0.5,
            drift_period_s: 2.0,
            n_classes: 42,
            classes: None,
            event_rate_hz: 20.0,
            min_dwell_us: 80.0,
            max_dwell_us: 5000.0,
            min_gap_samples: 4096,
            class_table: None,
            class_params: ClassTableParams::default(),
            forced_events: Vec::new(),
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_samples(&self) -> usize {
        (self.sample_rate_hz * self.duration_s).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(config_err("sample_rate_hz must be positive"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(config_err("duration_s must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(config_err("noise_sigma must be non-negative"));
        }
        if !(self.open_pore_mean > 0.0) {
            return Err(config_err("open_pore_mean must be positive"));
        }
        if self.n_classes == 0 || self.n_classes > 4096 {
            return Err(config_err("n_classes must lie in [1, 4096]"));
        }
        if !(self.event_rate_hz >= 0.0) {
            return Err(config_err("event_rate_hz must be non-negative"));
        }
        if self.baseline_drift_amplitude < 0.0
            || self.baseline_drift_amplitude >= self.open_pore_mean
        {
            return Err(config_err("baseline drift must be in [0, open_pore_mean)"));
        }
        if self.baseline_drift_amplitude > 0.0 && !(self.drift_period_s > 0.0) {
            return Err(config_err("drift_period_s must be positive"));
        }
        if !(self.min_dwell_us >= 0.0 && self.max_dwell_us >= self.min_dwell_us) {
            return Err(config_err("dwell bounds must satisfy 0 <= min <= max"));
        }
        if let Some(classes) = &self.classes {
            if classes.is_empty() || classes.iter().any(|&c| c as usize >= self.n_classes) {
                return Err(config_err("classes must be a nonempty subset of [0, n_classes)"));
            }
        }
        if let Some(table) = &self.class_table {
            if table.len() != self.n_classes {
                return Err(config_err("class_table length must equal n_classes"));
            }
            for (i, sig) in table.iter().enumerate() {
                if sig.class_id as usize != i {
                    return Err(config_err("class_table must be ordered by class_id"));
                }
                sig.validate()?;
            }
        }
        if !self.forced_events.is_empty() && self.event_rate_hz > 0.0 {
            return Err(config_err("forced_events require event_rate_hz = 0"));
        }
        for ev in &self.forced_events {
            if ev.class_id as usize >= self.n_classes {
                return Err(config_err("forced event class out of range"));
            }
            if !(ev.depth > 0.0 && ev.depth < 1.0) || !(ev.dwell_us > 0.0) {
                return Err(config_err("forced event needs depth in (0,1) and positive dwell"));
            }
        }
        Ok(())
    }

    pub fn resolved_class_table(&self) -> Result<Vec<ClassSignature>> {
        match &self.class_table {
            Some(t) => Ok(t.clone()),
            None => auto_class_table_with(self.n_classes, self.rng_seed, &self.class_params),
        }
    }

    fn baseline(&self, t: f64) -> f64 {
        if self.baseline_drift_amplitude == 0.0 {
            self.open_pore_mean
        } else {
            self.open_pore_mean
                + self.baseline_drift_amplitude * (2.0 * PI * t / self.drift_period_s).sin()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEvent {
    pub class_id: u32,
    pub start_sample: u64,
    /// Exclusive.
    pub end_sample: u64,
    pub true_mean_rel_blockade: f64,
}

impl GroundTruthEvent {
    pub fn len(&self) -> usize {
        (self.end_sample - self.start_sample) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end_sample == self.start_sample
    }
}

pub fn annotations_to_json(events: &[GroundTruthEvent]) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec_pretty(events)?)
}

pub fn annotations_from_json(bytes: &[u8]) -> Result<Vec<GroundTruthEvent>> {
    Ok(serde_json::from_slice(bytes)?)
}

struct Placed {
    class_id: u32,
    start: usize,
    len: usize,
    depth: f64,
    phase: f64,
}

const DEPTH_MIN: f64 = 0.05;
const DEPTH_MAX: f64 = 0.9;

fn draw_depth<R: Rng>(rng: &mut R, sig: &ClassSignature) -> f64 {
    // Gaussian + Cauchy is exactly Voigt distributed.
    loop {
        let g: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.random();
        let cauchy = (PI * (u - 0.5)).tan();
        let d = sig.mean_rel_blockade + sig.blockade_sigma_g * g + sig.blockade_gamma_l * cauchy;
        if (DEPTH_MIN..=DEPTH_MAX).contains(&d) {
            return d;
        }
    }
}

fn schedule<R: Rng>(
    cfg: &SynthConfig,
    table: &[ClassSignature],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Placed>> {
    let fs = cfg.sample_rate_hz;
    let us_to_samples = |us: f64| ((us * fs / 1e6).round() as usize).max(1);

    if !cfg.forced_events.is_empty() {
        let mut placed: Vec<Placed> = cfg
            .forced_events
            .iter()
            .map(|ev| {
                let len = us_to_samples(ev.dwell_us);
                let start = match ev.start_us {
                    Some(s) => (s * fs / 1e6).round() as usize,
                    None => n.saturating_sub(len) / 2,
                };
                Placed {
                    class_id: ev.class_id,
                    start,
                    len,
                    depth: ev.depth,
                    phase: 0.0,
                }
            })
            .collect();
        placed.sort_by_key(|p| p.start);
        let mut prev_end = 0usize;
        for (i, p) in placed.iter().enumerate() {
            let gap_ok = if i == 0 { true } else { p.start >= prev_end + cfg.min_gap_samples };
            if !gap_ok || p.start + p.len > n {
                return Err(config_err("forced events overlap, violate the gap, or overrun the trace"));
            }
            prev_end = p.start + p.len;
        }
        return Ok(placed);
    }

    if cfg.event_rate_hz == 0.0 {
        return Ok(Vec::new());
    }

    let classes: Vec<u32> = match &cfg.classes {
        Some(c) => c.clone(),
        None => (0..cfg.n_classes as u32).collect(),
    };
    let mean_len = classes
        .iter()
        .map(|&c| {
            let scale = table[c as usize].dwell_scale_us;
            (cfg.min_dwell_us + scale).min(cfg.max_dwell_us) * fs / 1e6
        })
        .sum::<f64>()
        / classes.len() as f64;
    let spacing = fs / cfg.event_rate_hz;
    let slack = spacing - cfg.min_gap_samples as f64 - mean_len;
    if slack <= 0.0 {
        return Err(config_err(format!(
            "event_rate_hz {} too high: mean spacing {:.0} samples cannot hold the {}-sample gap plus a {:.0}-sample mean event",
            cfg.event_rate_hz, spacing, cfg.min_gap_samples, mean_len
        )));
    }
    let gap_extra = Exp::new(1.0 / slack).map_err(|e| config_err(e.to_string()))?;

    let mut placed = Vec::new();
    let mut pos = cfg.min_gap_samples + gap_extra.sample(rng).round() as usize;
    loop {
        let class_id = classes[rng.random_range(0..classes.len())];
        let sig = &table[class_id as usize];
        let dwell_exp = Exp::new(1.0 / sig.dwell_scale_us).map_err(|e| config_err(e.to_string()))?;
        let dwell_us = (cfg.min_dwell_us + dwell_exp.sample(rng)).min(cfg.max_dwell_us);
        let len = us_to_samples(dwell_us);
        let depth = draw_depth(rng, sig);
        let phase = rng.random::<f64>() * 2.0 * PI;
        if pos + len + cfg.min_gap_samples > n {
            break;
        }
        placed.push(Placed {
            class_id,
            start: pos,
            len,
            depth,
            phase,
        });
        pos += len + cfg.min_gap_samples + gap_extra.sample(rng).round() as usize;
    }
    Ok(placed)
}

/// Generate a trace and its exact annotations.
pub fn generate_trace(cfg: &SynthConfig) -> Result<(Trace, Vec<GroundTruthEvent>)> {
    cfg.validate()?;
    let table = cfg.resolved_class_table()?;
    let n = cfg.n_samples();
    let fs = cfg.sample_rate_hz;
    let mut rng = rng_from_seed(cfg.rng_seed);
    let events = schedule(cfg, &table, n, &mut rng)?;

    let mut samples = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(events.len());
    let mut next = events.iter().peekable();
    let mut i = 0usize;
    while i < n {
        if let Some(ev) = next.next_if(|ev| ev.start == i) {
            let sig = &table[ev.class_id as usize];
            let omega = 2.0 * PI * sig.intra_event_osc_freq_hz / fs;
            let mut rel_sum = 0.0;
            for k in 0..ev.len {
                let t = (i + k) as f64 / fs;
                let rel = ev.depth + sig.osc_amplitude * (omega * k as f64 + ev.phase).sin();
                rel_sum += rel;
                let noise: f64 = rng.sample(StandardNormal);
                samples.push((cfg.baseline(t) * rel + cfg.noise_sigma * noise) as f32);
            }
            truth.push(GroundTruthEvent {
                class_id: ev.class_id,
                start_sample: ev.start as u64,
                end_sample: (ev.start + ev.len) as u64,
                true_mean_rel_blockade: rel_sum / ev.len as f64,
            });
            i += ev.len;
        } else {
            let t = i as f64 / fs;
            let noise: f64 = rng.sample(StandardNormal);
            samples.push((cfg.baseline(t) + cfg.noise_sigma * noise) as f32);
            i += 1;
        }
    }
    Ok((Trace::new(fs, samples), truth))
}

/// Local open-pore current at sample `i`, without noise.
pub fn baseline_at(cfg: &SynthConfig, i: usize) -> f64 {
    cfg.baseline(i as f64 / cfg.sample_rate_hz)
}
