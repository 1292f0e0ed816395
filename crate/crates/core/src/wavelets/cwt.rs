use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{reflect_index, Signal};
use crate::error::{input_err, Result};

/// Analytic mother wavelets, defined by their frequency-domain window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum MotherWavelet {
    /// Hermitian hat: `xi (1 + xi) exp(-xi^2 / 2)` for `xi = omega - mu >= 0`, else 0.
    HermitianHat { mu: f64 },
    /// Morlet with the zero-mean correction term.
    Morlet { omega0: f64 },
}

impl Default for MotherWavelet {
    fn default() -> Self {
        MotherWavelet::HermitianHat { mu: 5.0 }
    }
}

impl MotherWavelet {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MotherWavelet::HermitianHat { mu } if !(mu > 0.0 && mu.is_finite()) => {
                Err(input_err("Hermitian hat requires mu > 0"))
            }
            MotherWavelet::Morlet { omega0 } if !(omega0 > 0.0 && omega0.is_finite()) => {
                Err(input_err("Morlet requires omega0 > 0"))
            }
            _ => Ok(()),
        }
    }

    fn raw(&self, omega: f64) -> f64 {
        match *self {
            MotherWavelet::HermitianHat { mu } => {
                let xi = omega - mu;
                if xi < 0.0 {
                    0.0
                } else {
                    xi * (1.0 + xi) * (-0.5 * xi * xi).exp()
                }
            }
            MotherWavelet::Morlet { omega0 } => {
                let d = omega - omega0;
                (-0.5 * d * d).exp() - (-0.5 * omega0 * omega0).exp() * (-0.5 * omega * omega).exp()
            }
        }
    }

    /// Interval outside which the raw window is below double precision.
    fn support(&self) -> (f64, f64) {
        match *self {
            MotherWavelet::HermitianHat { mu } => (mu, mu + 40.0),
            MotherWavelet::Morlet { omega0 } => (omega0.min(40.0) - 40.0, omega0 + 40.0),
        }
    }

    /// Scale factor giving unit L2 norm: `(1/2pi) * integral |psi_hat|^2 = 1`.
    pub fn norm_constant(&self) -> f64 {
        let (lo, hi) = self.support();
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * self.raw(lo + i as f64 * h).powi(2);
        }
        let energy = acc * h / 3.0 / (2.0 * PI);
        1.0 / energy.sqrt()
    }

    /// Dimensionless frequency of the window maximum, by golden-section search.
    pub fn peak_frequency(&self) -> f64 {
        let (mut a, mut b) = match *self {
            MotherWavelet::HermitianHat { mu } => (mu, mu + 10.0),
            MotherWavelet::Morlet { omega0 } => ((omega0 - 5.0).max(0.0), omega0 + 5.0),
        };
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        while (b - a).abs() > 1e-12 {
            if self.raw(c) > self.raw(d) {
                b = d;
            } else {
                a = c;
            }
            c = b - g * (b - a);
            d = a + g * (b - a);
        }
        0.5 * (a + b)
    }
}

/// Normalized frequency response of the mother wavelet at dimensionless frequency `omega`.
pub fn wavelet_freq_response(wavelet: &MotherWavelet, omega: f64) -> Complex64 {
    Complex64::new(wavelet.norm_constant() * wavelet.raw(omega), 0.0)
}

/// Log-spaced scales (in samples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleGrid {
    pub scales: Vec<f64>,
    pub n_voices: usize,
    pub a_min: f64,
    pub a_max: f64,
}

impl ScaleGrid {
    pub fn log_spaced(a_min: f64, n_voices: usize, n_octaves: usize) -> Result<Self> {
        if !(a_min > 0.0 && a_min.is_finite()) {
            return Err(input_err("scale grid requires a_min > 0"));
        }
        let count = n_voices * n_octaves;
        if count < 2 {
            return Err(input_err("scale grid needs at least two scales"));
        }
        let scales: Vec<f64> = (0..count)
            .map(|j| a_min * 2f64.powf(j as f64 / n_voices as f64))
            .collect();
        Ok(Self {
            a_max: *scales.last().unwrap(),
            scales,
            n_voices,
            a_min,
        })
    }

    /// Grid whose smallest scale has an equivalent period of `min_period` samples.
    pub fn from_min_period(
        wavelet: &MotherWavelet,
        min_period: f64,
        n_voices: usize,
        n_octaves: usize,
    ) -> Result<Self> {
        Self::log_spaced(
            min_period * wavelet.peak_frequency() / (2.0 * PI),
            n_voices,
            n_octaves,
        )
    }

    /// Default grid for an `n`-sample signal: 8 voices per octave, equivalent
    /// periods from 2 samples up to `n / 2` samples.
    pub fn default_for_len(wavelet: &MotherWavelet, n: usize) -> Result<Self> {
        let octaves = ((n as f64 / 4.0).log2().floor() as usize).max(1);
        Self::from_min_period(wavelet, 2.0, 8, octaves)
    }

    /// Equivalent period in samples of scale `a`.
    pub fn period_of(wavelet: &MotherWavelet, a: f64) -> f64 {
        2.0 * PI * a / wavelet.peak_frequency()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_min > 0.0) || self.scales.first().is_none_or(|&a| a <= 0.0) {
            return Err(input_err("degenerate scale grid: a_min must be positive"));
        }
        if self.scales.len() < 2 || self.scales.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(input_err("scale grid must be strictly increasing with >= 2 scales"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

/// `W(a, b)`: rows are scales, columns are time shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct CwtCoefficients {
    pub data: Vec<Complex64>,
    pub n_scales: usize,
    pub n_times: usize,
    pub scales: Vec<f64>,
    /// Time of each column in seconds.
    pub times: Vec<f64>,
}

impl CwtCoefficients {
    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.n_times..(i + 1) * self.n_times]
    }

    pub fn get(&self, scale: usize, time: usize) -> Complex64 {
        self.data[scale * self.n_times + time]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Time-domain envelope half-width of the wavelet at unit scale; the reflect
/// padding is this many multiples of the largest scale.
const SUPPORT_HALF_WIDTH: f64 = 6.0;

/// Continuous wavelet transform by frequency-domain multiplication.
///
/// Each row is the correlation of the signal with the `1/sqrt(a)`-normalized
/// dilated wavelet. The signal is reflect-padded by the widest effective
/// support and cropped afterwards. The first sample is subtracted first;
/// the wavelet is zero-mean, so this only removes rounding from a DC offset.
pub fn cwt(signal: &Signal, wavelet: &MotherWavelet, grid: &ScaleGrid) -> Result<CwtCoefficients> {
    let n = signal.len();
    if n < 8 {
        return Err(input_err("cwt requires at least 8 samples"));
    }
    wavelet.validate()?;
    grid.validate()?;

    let pad = (SUPPORT_HALF_WIDTH * grid.a_max).ceil() as usize;
    let len = (n + 2 * pad).next_power_of_two();
    let offset = signal.samples[0];
    let mut spectrum: Vec<Complex64> = (0..len)
        .map(|i| {
            let x = signal.samples[reflect_index(i as isize - pad as isize, n)];
            Complex64::new(x - offset, 0.0)
        })
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(len);
    let inverse: Arc<dyn Fft<f64>> = planner.plan_fft_inverse(len);
    forward.process(&mut spectrum);

    let norm = wavelet.norm_constant();
    let omegas: Vec<f64> = (0..len)
        .map(|k| {
            let k = if k <= len / 2 { k as f64 } else { k as f64 - len as f64 };
            2.0 * PI * k / len as f64
        })
        .collect();

    let rows: Vec<Vec<Complex64>> = grid
        .scales
        .par_iter()
        .map(|&a| {
            let gain = norm * a.sqrt() / len as f64;
            let mut buf: Vec<Complex64> = spectrum
                .iter()
                .zip(&omegas)
                .map(|(x, &w)| {
                    let psi = wavelet.raw(a * w);
                    if psi == 0.0 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        x * (gain * psi)
                    }
                })
                .collect();
            inverse.process(&mut buf);
            buf[pad..pad + n].to_vec()
        })
        .collect();

    Ok(CwtCoefficients {
        data: rows.concat(),
        n_scales: grid.len(),
        n_times: n,
        scales: grid.scales.clone(),
        times: (0..n).map(|i| i as f64 / signal.sample_rate_hz).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(x: Vec<f64>) -> Signal {
        Signal::new(x, 1.0).unwrap()
    }

    #[test]
    fn admissible_at_dc() {
        for w in [
            MotherWavelet::HermitianHat { mu: 5.0 },
            MotherWavelet::Morlet { omega0: 6.0 },
        ] {
            assert!(wavelet_freq_response(&w, 0.0).norm() < 1e-12);
        }
    }

    #[test]
    fn hermitian_hat_real_nonnegative_on_support() {
        let w = MotherWavelet::HermitianHat { mu: 5.0 };
        for i in 0..200 {
            let r = wavelet_freq_response(&w, 5.0 + i as f64 * 0.05);
            assert_eq!(r.im, 0.0);
            assert!(r.re >= 0.0);
        }
        assert_eq!(wavelet_freq_response(&w, 4.9).re, 0.0);
    }

    #[test]
    fn unit_norm() {
        let w = MotherWavelet::Morlet { omega0: 6.0 };
        let c = w.norm_constant();
        // Independent midpoint-rule check of (1/2pi) * integral |c psi|^2.
        let h = 1e-3;
        let e: f64 = (0..80_000)
            .map(|i| {
                let om = -34.0 + (i as f64 + 0.5) * h;
                (c * w.raw(om)).powi(2)
            })
            .sum::<f64>()
            * h
            / (2.0 * PI);
        assert!((e - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_signal_all_zero() {
        let w = MotherWavelet::default();
        let g = ScaleGrid::default_for_len(&w, 64).unwrap();
        let out = cwt(&sig(vec![0.0; 64]), &w, &g).unwrap();
        assert!(out.data.iter().all(|c| c.re == 0.0 && c.im == 0.0));
        assert_eq!(out.n_times, 64);
        assert_eq!(out.n_scales, g.len());
    }

    #[test]
    fn constant_signal_vanishes() {
        let w = MotherWavelet::default();
        let g = ScaleGrid::default_for_len(&w, 128).unwrap();
        let c = 7.25;
        let out = cwt(&sig(vec![c; 128]), &w, &g).unwrap();
        let bound = 1e-10 * c * (128f64).sqrt();
        assert!(out.data.iter().all(|z| z.norm() < bound));
    }

    #[test]
    fn rejects_short_signal_and_bad_grid() {
        let w = MotherWavelet::default();
        let g = ScaleGrid::log_spaced(1.0, 4, 2).unwrap();
        assert!(cwt(&sig(vec![1.0; 7]), &w, &g).is_err());
        assert!(ScaleGrid::log_spaced(0.0, 4, 2).is_err());
        let bad = ScaleGrid {
            scales: vec![-1.0, 2.0],
            n_voices: 1,
            a_min: -1.0,
            a_max: 2.0,
        };
        assert!(cwt(&sig(vec![1.0; 16]), &w, &bad).is_err());
    }

    #[test]
    fn peak_frequency_matches_stationary_point() {
        // d/dxi [xi (1 + xi) e^{-xi^2/2}] = 0  <=>  1 + 2 xi - xi^2 - xi^3 = 0.
        let w = MotherWavelet::HermitianHat { mu: 5.0 };
        let xi = w.peak_frequency() - 5.0;
        assert!((1.0 + 2.0 * xi - xi * xi - xi.powi(3)).abs() < 1e-6);
    }
}
