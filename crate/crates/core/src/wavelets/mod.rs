//! Wavelet engines: the biorthogonal 1.5 threshold denoiser and the
//! continuous wavelet transform used to build scaleograms.

mod cwt;
mod dwt;

pub use cwt::{cwt, wavelet_freq_response, CwtCoefficients, MotherWavelet, ScaleGrid};
pub use dwt::{dwt_denoise, dwt_forward, dwt_inverse, Decomposition, BIOR15};

use crate::error::{input_err, Result};

/// A real-valued signal held in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub sample_rate_hz: f64,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(input_err("signal must contain at least one sample"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(input_err(format!("signal sample {i} is not finite")));
        }
        if !(sample_rate_hz > 0.0) {
            return Err(input_err("sample rate must be positive"));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn from_f32(samples: &[f32], sample_rate_hz: f64) -> Result<Self> {
        Self::new(samples.iter().map(|&x| x as f64).collect(), sample_rate_hz)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Symmetric ("reflect", edge not repeated) index into a length-`n` signal,
/// valid for any integer offset.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}
