//! Multi-level periodized biorthogonal 1.5 filter bank.
//!
//! The input is reflect-extended to a multiple of `2^levels` with a margin
//! wide enough that the periodic wrap never touches the original samples,
//! decomposed, optionally thresholded, and cropped back after synthesis.

use super::{reflect_index, Signal};
use crate::error::{input_err, Result};

/// Biorthogonal 1.5 filters from the spline family.
pub struct Bior15 {
    pub dec_lo: [f64; 10],
    pub dec_hi: [f64; 10],
    pub rec_lo: [f64; 10],
    pub rec_hi: [f64; 10],
}

const R2: f64 = std::f64::consts::SQRT_2;
const A: f64 = 3.0 / 256.0 * R2;
const B: f64 = 22.0 / 256.0 * R2;
const C: f64 = 128.0 / 256.0 * R2;
const H: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub const BIOR15: Bior15 = Bior15 {
    dec_lo: [A, -A, -B, B, C, C, B, -B, -A, A],
    dec_hi: [0.0, 0.0, 0.0, 0.0, -H, H, 0.0, 0.0, 0.0, 0.0],
    rec_lo: [0.0, 0.0, 0.0, 0.0, H, H, 0.0, 0.0, 0.0, 0.0],
    rec_hi: [A, A, -B, -B, C, -C, B, B, -A, -A],
};

// Alignment of analysis output k with input sample 2k + ANALYSIS_SHIFT, and the
// matching synthesis delay, chosen so the periodized bank reconstructs exactly.
const ANALYSIS_SHIFT: usize = 1;
const SYNTHESIS_DELAY: usize = 8;

/// Coefficients of a multi-level decomposition of a padded signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub approx: Vec<f64>,
    /// Detail coefficients, finest level first.
    pub details: Vec<Vec<f64>>,
    pub orig_len: usize,
    pub pad_left: usize,
}

fn analyze(x: &[f64], out_lo: &mut Vec<f64>, out_hi: &mut Vec<f64>) {
    let m = x.len();
    let half = m / 2;
    out_lo.clear();
    out_hi.clear();
    for k in 0..half {
        let mut lo = 0.0;
        let mut hi = 0.0;
        for n in 0..10 {
            let idx = (2 * k + ANALYSIS_SHIFT + m * 10 - n) % m;
            lo += BIOR15.dec_lo[n] * x[idx];
            hi += BIOR15.dec_hi[n] * x[idx];
        }
        out_lo.push(lo);
        out_hi.push(hi);
    }
}

fn synthesize(lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let m = 2 * lo.len();
    let mut y = vec![0.0; m];
    for k in 0..lo.len() {
        for n in 0..10 {
            let idx = (2 * k + n + m * 10 - SYNTHESIS_DELAY) % m;
            y[idx] += BIOR15.rec_lo[n] * lo[k] + BIOR15.rec_hi[n] * hi[k];
        }
    }
    y
}

fn check_levels(n: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(input_err("levels must be at least 1"));
    }
    if levels >= usize::BITS as usize || (1usize << levels) > n {
        return Err(input_err(format!(
            "signal of length {n} too short for {levels} decomposition levels"
        )));
    }
    Ok(())
}

pub fn dwt_forward(x: &[f64], levels: usize) -> Result<Decomposition> {
    let n = x.len();
    check_levels(n, levels)?;
    let block = 1usize << levels;
    let margin = 8 * block;
    let padded_len = (n + 2 * margin).div_ceil(block) * block;
    let mut cur: Vec<f64> = (0..padded_len)
        .map(|i| x[reflect_index(i as isize - margin as isize, n)])
        .collect();
    let mut details = Vec::with_capacity(levels);
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for _ in 0..levels {
        analyze(&cur, &mut lo, &mut hi);
        details.push(hi.clone());
        std::mem::swap(&mut cur, &mut lo);
    }
    Ok(Decomposition {
        approx: cur,
        details,
        orig_len: n,
        pad_left: margin,
    })
}

pub fn dwt_inverse(dec: &Decomposition) -> Vec<f64> {
    let mut cur = dec.approx.clone();
    for d in dec.details.iter().rev() {
        cur = synthesize(&cur, d);
    }
    cur[dec.pad_left..dec.pad_left + dec.orig_len].to_vec()
}

/// Hard-threshold wavelet denoising: detail coefficients with magnitude
/// below `threshold` are zeroed, the approximation is kept.
pub fn dwt_denoise(signal: &Signal, threshold: f64, levels: usize) -> Result<Signal> {
    if !(threshold >= 0.0) {
        return Err(input_err("threshold must be non-negative"));
    }
    let mut dec = dwt_forward(&signal.samples, levels)?;
    for level in &mut dec.details {
        for c in level.iter_mut() {
            if c.abs() < threshold {
                *c = 0.0;
            }
        }
    }
    Ok(Signal {
        samples: dwt_inverse(&dec),
        sample_rate_hz: signal.sample_rate_hz,
    })
}
