//! Faddeeva function `w(z) = exp(-z^2) erfc(-iz)` in the upper half plane,
//! by Weideman's rational (polynomial in a Möbius variable) expansion.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

const TERMS: usize = 32;

struct Coefficients {
    l: f64,
    /// Highest degree first.
    a: Vec<f64>,
}

fn coefficients() -> &'static Coefficients {
    static COEF: OnceLock<Coefficients> = OnceLock::new();
    COEF.get_or_init(|| {
        let m = 2 * TERMS;
        let m2 = 2 * m;
        let l = (TERMS as f64 / 2f64.sqrt()).sqrt();
        // f sampled at theta_k = k pi / m, k = -m+1 ..= m-1, with a leading zero.
        let mut f = vec![0.0; m2];
        for (slot, k) in f.iter_mut().skip(1).zip(-(m as isize) + 1..m as isize) {
            let theta = k as f64 * PI / m as f64;
            let t = l * (theta / 2.0).tan();
            *slot = (-t * t).exp() * (l * l + t * t);
        }
        // fftshift, then forward FFT.
        let mut buf: Vec<Complex64> = (0..m2)
            .map(|i| Complex64::new(f[(i + m2 / 2) % m2], 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(m2).process(&mut buf);
        let mut a: Vec<f64> = buf[1..=TERMS].iter().map(|c| c.re / m2 as f64).collect();
        a.reverse();
        Coefficients { l, a }
    })
}

/// Valid for `Im z >= 0`.
pub fn faddeeva(z: Complex64) -> Complex64 {
    let c = coefficients();
    let iz = Complex64::new(-z.im, z.re);
    let denom = Complex64::new(c.l, 0.0) - iz;
    let zz = (Complex64::new(c.l, 0.0) + iz) / denom;
    let mut p = Complex64::new(0.0, 0.0);
    for &ak in &c.a {
        p = p * zz + ak;
    }
    2.0 * p / (denom * denom) + (1.0 / PI.sqrt()) / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        // w(0) = 1; w(i y) = exp(y^2) erfc(y), erfc(1) = 0.157299207050285.
        let w0 = faddeeva(Complex64::new(0.0, 0.0));
        assert!((w0.re - 1.0).abs() < 1e-10 && w0.im.abs() < 1e-10);
        let w1 = faddeeva(Complex64::new(0.0, 1.0));
        let expect = 1f64.exp() * 0.157_299_207_050_285_13;
        assert!((w1.re - expect).abs() < 1e-10 * expect);
        // Im w(x) on the real axis is 2/sqrt(pi) * Dawson(x); Dawson(1) = 0.5380795069127684.
        let wr = faddeeva(Complex64::new(1.0, 0.0));
        assert!((wr.im - 2.0 / PI.sqrt() * 0.538_079_506_912_768_4).abs() < 1e-9);
        assert!((wr.re - (-1f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn large_argument_asymptote() {
        let z = Complex64::new(30.0, 5.0);
        let w = faddeeva(z);
        let asym = Complex64::new(0.0, 1.0 / PI.sqrt()) / z;
        assert!((w - asym).norm() / asym.norm() < 1e-3);
    }
}
