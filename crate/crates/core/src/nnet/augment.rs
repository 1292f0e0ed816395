use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scaleogram::bilinear_resize_f32;

/// Training-time image augmentation. Each step is gated by its probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub crop_p: f64,
    /// Range of the crop's area as a fraction of the image.
    pub crop_area: (f64, f64),
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub erase_p: f64,
    pub erase_area: (f64, f64),
    /// Erased pixels take this value (the dataset mean).
    pub fill: f32,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            crop_p: 0.5,
            crop_area: (0.6, 1.0),
            hflip_p: 0.5,
            vflip_p: 0.5,
            erase_p: 0.5,
            erase_area: (0.02, 0.2),
            fill: 0.0,
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        Self {
            crop_p: 0.0,
            hflip_p: 0.0,
            vflip_p: 0.0,
            erase_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let p_ok = [self.crop_p, self.hflip_p, self.vflip_p, self.erase_p]
            .iter()
            .all(|p| (0.0..=1.0).contains(p));
        let range_ok = |(lo, hi): (f64, f64)| 0.0 < lo && lo <= hi && hi <= 1.0;
        if !p_ok || !range_ok(self.crop_area) || !range_ok(self.erase_area) {
            return Err(crate::error::config_err(
                "augmentation probabilities must lie in [0, 1] and area ranges in (0, 1]",
            ));
        }
        Ok(())
    }
}

/// Mirror left-right.
pub fn hflip(img: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = img.to_vec();
    for r in 0..h {
        out[r * w..(r + 1) * w].reverse();
    }
    out
}

/// Mirror top-bottom.
pub fn vflip(img: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(img.len());
    for r in (0..h).rev() {
        out.extend_from_slice(&img[r * w..(r + 1) * w]);
    }
    out
}

/// Overwrites the given row and column ranges with `fill`.
pub fn erase_rect(img: &mut [f32], w: usize, rows: Range<usize>, cols: Range<usize>, fill: f32) {
    for r in rows {
        img[r * w + cols.start..r * w + cols.end].fill(fill);
    }
}

fn rect<R: Rng>(rng: &mut R, h: usize, w: usize, area: f64, log_aspect: (f64, f64)) -> (usize, usize, usize, usize) {
    let target = area * (h * w) as f64;
    let ratio = rng.random_range(log_aspect.0..=log_aspect.1).exp();
    let rh = ((target / ratio).sqrt().round() as usize).clamp(1, h);
    let rw = ((target * ratio).sqrt().round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    (top, left, rh, rw)
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Resized crop, horizontal flip, vertical flip, erasure, in that order.
pub fn augment<R: Rng>(img: &[f32], h: usize, w: usize, p: &AugmentParams, rng: &mut R) -> Vec<f32> {
    let mut out = img.to_vec();
    if p.crop_p > 0.0 && rng.random_bool(p.crop_p) {
        let area = uniform(rng, p.crop_area);
        let a = (0.75f64).ln();
        let (top, left, rh, rw) = rect(rng, h, w, area, (a, -a));
        let mut crop = Vec::with_capacity(rh * rw);
        for r in top..top + rh {
            crop.extend_from_slice(&out[r * w + left..r * w + left + rw]);
        }
        out = bilinear_resize_f32(&crop, rh, rw, h, w).expect("crop is non-empty");
    }
    if p.hflip_p > 0.0 && rng.random_bool(p.hflip_p) {
        out = hflip(&out, h, w);
    }
    if p.vflip_p > 0.0 && rng.random_bool(p.vflip_p) {
        out = vflip(&out, h, w);
    }
    if p.erase_p > 0.0 && rng.random_bool(p.erase_p) {
        let area = uniform(rng, p.erase_area);
        let a = (0.3f64).ln();
        let (top, left, rh, rw) = rect(rng, h, w, area, (a, -a));
        erase_rect(&mut out, w, top..top + rh, left..left + rw, p.fill);
    }
    out
}
