//! Reference computations written independently of the library code paths.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use npclass_core::labeling::{voigt_value, VoigtPeak};
use npclass_core::wavelets::{wavelet_freq_response, MotherWavelet, ScaleGrid};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, Normal};

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let n: f64 = b.iter().map(|y| y * y).sum();
    if n == 0.0 {
        d.sqrt()
    } else {
        (d / n).sqrt()
    }
}

/// Half width at half maximum by plain bisection on `voigt_value`, bracketed
/// by `[0, f_G + f_L]` (the Voigt FWHM never exceeds the sum of the widths).
pub fn fwhm_bisection(sigma_g: f64, gamma_l: f64) -> f64 {
    let peak = VoigtPeak {
        center: 0.0,
        sigma_g,
        gamma_l,
        amplitude: 1.0,
        fwhm: f64::NAN,
    };
    let half = 0.5 * voigt_value(0.0, &peak);
    let (mut lo, mut hi) = (0.0, 2.0 * (2.0 * 2f64.ln()).sqrt() * sigma_g + 2.0 * gamma_l);
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if voigt_value(mid, &peak) > half {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo + hi
}

/// Voigt-distributed draws: a Gaussian plus an independent Cauchy variate.
pub fn voigt_draws(rng: &mut ChaCha8Rng, n: usize, center: f64, sigma_g: f64, gamma_l: f64) -> Vec<f64> {
    let g = Normal::new(0.0, sigma_g).unwrap();
    let c = Cauchy::new(0.0, gamma_l).unwrap();
    (0..n).map(|_| center + g.sample(rng) + c.sample(rng)).collect()
}

/// Row of the largest CWT response to `sin(omega t)`: the transform of a pure
/// tone at scale `a` has modulus `sqrt(a) |psi_hat(a omega)|`.
pub fn cwt_peak_row(wavelet: &MotherWavelet, grid: &ScaleGrid, omega: f64) -> usize {
    let resp: Vec<f64> = grid
        .scales
        .iter()
        .map(|&a| a.sqrt() * wavelet_freq_response(wavelet, a * omega).norm())
        .collect();
    argmax(&resp)
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

pub fn sine(n: usize, period: f64, phase: f64) -> Vec<f64> {
    (0..n).map(|t| (2.0 * PI * t as f64 / period + phase).sin()).collect()
}

pub fn random_signal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut walk = 0.0;
    (0..n)
        .map(|_| {
            walk += rng.random_range(-1.0..1.0);
            walk + 5.0 * rng.random_range(-1.0..1.0)
        })
        .collect()
}

/// Exact mean of the per-class accuracies over classes present in `truth`.
pub fn exact_macro(truth: &[usize], pred: &[usize]) -> BigRational {
    let mut n: BTreeMap<usize, i64> = BTreeMap::new();
    let mut hit: BTreeMap<usize, i64> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        *n.entry(t).or_default() += 1;
        if t == p {
            *hit.entry(t).or_default() += 1;
        }
    }
    let mut sum = BigRational::zero();
    for (c, &cnt) in &n {
        let h = hit.get(c).copied().unwrap_or(0);
        sum += BigRational::new(h.into(), cnt.into());
    }
    sum / BigRational::from_integer((n.len() as i64).into())
}

/// True when `x` is a nearest double to the exact value `r`.
pub fn is_nearest(r: &BigRational, x: f64) -> bool {
    let exact_x = BigRational::from_float(x).unwrap();
    let err = (r - &exact_x).abs();
    [x.next_up(), x.next_down()].iter().all(|&y| {
        let ey = BigRational::from_float(y).unwrap();
        err <= (r - ey).abs()
    })
}

pub fn approx_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap()
}
