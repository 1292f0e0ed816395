//! Log-magnitude CWT images of events, bilinear resizing and train-set
//! pixel standardization.
//!
//! Row `i` of a scaleogram is scale index `i` of the grid, so small scales
//! (high frequencies) sit at the top and low frequencies at the bottom.

use std::fs;
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::events::Event;
use crate::synthdata::{read_array, read_u32};
use crate::wavelets::{cwt, MotherWavelet, ScaleGrid, Signal};

pub const SCALEOGRAM_MAGIC: &[u8; 4] = b"NPSG";
pub const SCALEOGRAM_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Scaleogram {
    /// Row-major `height x width`.
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub event_id: u64,
    pub grid_id: String,
}

impl Scaleogram {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.pixels.len());
        out.extend_from_slice(SCALEOGRAM_MAGIC);
        out.extend_from_slice(&SCALEOGRAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.event_id.to_le_bytes());
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    /// Parses one record from the front of `r`, advancing it.
    pub fn read_from(r: &mut &[u8]) -> Result<Self> {
        let magic: [u8; 4] = read_array(r)?;
        if &magic != SCALEOGRAM_MAGIC {
            return Err(Error::Format {
                what: "scaleogram magic",
                expected: "NPSG".into(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let version = read_u32(r)?;
        if version != SCALEOGRAM_VERSION {
            return Err(Error::Format {
                what: "scaleogram version",
                expected: SCALEOGRAM_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let height = read_u32(r)? as usize;
        let width = read_u32(r)? as usize;
        let event_id = u64::from_le_bytes(read_array(r)?);
        let n = height * width;
        if r.len() < 4 * n {
            return Err(Error::Format {
                what: "scaleogram payload bytes",
                expected: (4 * n).to_string(),
                found: r.len().to_string(),
            });
        }
        let mut pixels = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            pixels.push(f32::from_le_bytes(buf));
        }
        Ok(Self {
            pixels,
            height,
            width,
            event_id,
            grid_id: String::new(),
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let s = Self::read_from(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Format {
                what: "scaleogram trailing bytes",
                expected: "0".into(),
                found: r.len().to_string(),
            });
        }
        Ok(s)
    }
}

/// Scaleogram construction parameters. The scale grid is fixed across events
/// (in samples), so a row means the same frequency for every image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleogramConfig {
    pub wavelet: MotherWavelet,
    /// Equivalent period, in samples, of the smallest scale.
    pub min_period_samples: f64,
    pub n_voices: usize,
    pub n_octaves: usize,
    pub height: usize,
    pub width: usize,
    pub epsilon: f64,
}

impl Default for ScaleogramConfig {
    fn default() -> Self {
        Self {
            wavelet: MotherWavelet::default(),
            min_period_samples: 2.0,
            n_voices: 8,
            n_octaves: 6,
            height: 64,
            width: 64,
            epsilon: 1e-12,
        }
    }
}

impl ScaleogramConfig {
    pub fn validate(&self) -> Result<()> {
        self.wavelet.validate()?;
        if self.height == 0 || self.width == 0 {
            return Err(input_err("scaleogram size must be at least 1x1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(input_err("epsilon must be positive"));
        }
        if !(self.min_period_samples > 0.0) {
            return Err(input_err("min_period_samples must be positive"));
        }
        self.grid()?.validate()
    }

    pub fn grid(&self) -> Result<ScaleGrid> {
        ScaleGrid::from_min_period(&self.wavelet, self.min_period_samples, self.n_voices, self.n_octaves)
    }

    /// Short identifier of the wavelet and grid.
    pub fn grid_id(&self) -> String {
        let w = match self.wavelet {
            MotherWavelet::HermitianHat { mu } => format!("hhat{mu}"),
            MotherWavelet::Morlet { omega0 } => format!("morlet{omega0}"),
        };
        format!(
            "{w}-p{}-v{}-o{}",
            self.min_period_samples, self.n_voices, self.n_octaves
        )
    }

    pub fn build(&self, event: &Event) -> Result<Scaleogram> {
        let mut s = event_to_scaleogram(
            event,
            &self.wavelet,
            &self.grid()?,
            (self.height, self.width),
            self.epsilon,
        )?;
        s.grid_id = self.grid_id();
        Ok(s)
    }

    /// Builds scaleograms for many events in parallel; output order follows input.
    pub fn build_all(&self, events: &[Event]) -> Result<Vec<Scaleogram>> {
        events.par_iter().map(|e| self.build(e)).collect()
    }
}

/// `bilinear_resize(log(|W| + epsilon))` of the event's relative-current samples.
pub fn event_to_scaleogram(
    event: &Event,
    wavelet: &MotherWavelet,
    grid: &ScaleGrid,
    out_size: (usize, usize),
    epsilon: f64,
) -> Result<Scaleogram> {
    if event.rel_samples.len() < 8 {
        return Err(input_err(format!(
            "event {} has {} samples; scaleograms need at least 8",
            event.id,
            event.rel_samples.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(input_err("epsilon must be positive"));
    }
    let fs = if event.dwell_us > 0.0 {
        event.rel_samples.len() as f64 / (event.dwell_us * 1e-6)
    } else {
        1.0
    };
    let coeffs = cwt(&Signal::new(event.rel_samples.clone(), fs)?, wavelet, grid)?;
    let logmag: Vec<f64> = coeffs.data.iter().map(|c| (c.norm() + epsilon).ln()).collect();
    let (h, w) = out_size;
    let pixels = bilinear_resize(&logmag, coeffs.n_scales, coeffs.n_times, h, w)?
        .into_iter()
        .map(|v| v as f32)
        .collect();
    Ok(Scaleogram {
        pixels,
        height: h,
        width: w,
        event_id: event.id,
        grid_id: String::new(),
    })
}

fn source_coords(dst: usize, src: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a row-major `src_h x src_w` image with half-pixel
/// centers: output pixel `i` samples source coordinate
/// `(i + 0.5) * src / dst - 0.5`, clamped to the image.
pub fn bilinear_resize(src: &[f64], src_h: usize, src_w: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    if src_h == 0 || src_w == 0 || h == 0 || w == 0 {
        return Err(input_err("bilinear_resize needs non-empty source and target"));
    }
    if src.len() != src_h * src_w {
        return Err(Error::Shape(format!(
            "image has {} pixels, expected {src_h}x{src_w}",
            src.len()
        )));
    }
    if (src_h, src_w) == (h, w) {
        return Ok(src.to_vec());
    }
    let rows = source_coords(h, src_h);
    let cols = source_coords(w, src_w);
    let mut out = Vec::with_capacity(h * w);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = src[r0 * src_w + c0] * (1.0 - fx) + src[r0 * src_w + c1] * fx;
            let bot = src[r1 * src_w + c0] * (1.0 - fx) + src[r1 * src_w + c1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Ok(out)
}

/// `f32` convenience wrapper over [`bilinear_resize`].
pub fn bilinear_resize_f32(src: &[f32], src_h: usize, src_w: usize, h: usize, w: usize) -> Result<Vec<f32>> {
    let wide: Vec<f64> = src.iter().map(|&v| v as f64).collect();
    Ok(bilinear_resize(&wide, src_h, src_w, h, w)?
        .into_iter()
        .map(|v| v as f32)
        .collect())
}

/// Global pixel mean and standard deviation of a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelStats {
    pub mean: f64,
    pub std: f64,
    pub split_id: String,
    pub n_pixels: u64,
}

/// Single streaming Welford pass over every pixel of the given images.
/// Callers pass only TRAIN images; `split_id` records that.
pub fn compute_stats<'a, I>(train: I, split_id: &str) -> Result<PixelStats>
where
    I: IntoIterator<Item = &'a Scaleogram>,
{
    let mut n = 0u64;
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for s in train {
        for &p in &s.pixels {
            n += 1;
            let x = p as f64;
            let d = x - mean;
            mean += d / n as f64;
            m2 += d * (x - mean);
        }
    }
    if n == 0 {
        return Err(input_err("pixel statistics need a non-empty training set"));
    }
    let std = (m2 / n as f64).sqrt();
    if !(std > 0.0) {
        return Err(input_err("training set has zero pixel variance"));
    }
    Ok(PixelStats {
        mean,
        std,
        split_id: split_id.to_string(),
        n_pixels: n,
    })
}

pub fn standardize(s: &Scaleogram, stats: &PixelStats) -> Scaleogram {
    Scaleogram {
        pixels: s
            .pixels
            .iter()
            .map(|&p| ((p as f64 - stats.mean) / stats.std) as f32)
            .collect(),
        ..s.clone()
    }
}

/// Concatenated NPSG records.
pub fn write_scaleograms(path: &Path, items: &[Scaleogram]) -> Result<()> {
    let mut bytes = Vec::new();
    for s in items {
        bytes.extend_from_slice(&s.to_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn parse_scaleograms(bytes: &[u8]) -> Result<Vec<Scaleogram>> {
    let mut r = bytes;
    let mut out = Vec::new();
    while !r.is_empty() {
        out.push(Scaleogram::read_from(&mut r)?);
    }
    Ok(out)
}

pub fn read_scaleograms(path: &Path) -> Result<Vec<Scaleogram>> {
    parse_scaleograms(&fs::read(path)?)
}

pub fn write_stats(path: &Path, stats: &PixelStats) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(stats)?)?;
    Ok(())
}

pub fn read_stats(path: &Path) -> Result<PixelStats> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Binary PGM (P5) of a row-major image, min-max scaled to 0..=255.
pub fn pgm_bytes(pixels: &[f32], height: usize, width: usize) -> Vec<u8> {
    let lo = pixels.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = pixels.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&p| {
        if range > 0.0 {
            (((p - lo) / range) * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}
