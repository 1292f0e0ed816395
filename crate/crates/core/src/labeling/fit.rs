//! Least-squares fitting of a sum of Voigt profiles to a histogram by
//! Levenberg–Marquardt with a forward-difference Jacobian.

use serde::{Deserialize, Serialize};

use super::histogram::{local_maxima, BlockadeHistogram};
use super::voigt::{voigt_density, VoigtPeak};
use crate::error::{input_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Gaussian smoothing (std, in bins) applied before peak initialization.
    pub smoothing_sigma_bins: f64,
    /// Minimum peak prominence as a fraction of the smoothed maximum.
    pub min_prominence_fraction: f64,
    /// Relative residual above which a fit is flagged.
    pub high_residual_threshold: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            smoothing_sigma_bins: 3.0,
            min_prominence_fraction: 0.02,
            high_residual_threshold: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Sorted by center.
    pub peaks: Vec<VoigtPeak>,
    /// `||model - counts|| / ||counts||`.
    pub relative_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub high_residual: bool,
}

const PARAMS_PER_PEAK: usize = 4;

/// Initial guesses from the smoothed histogram's most prominent local maxima.
pub fn initial_peaks(
    hist: &BlockadeHistogram,
    n_peaks: usize,
    opts: &FitOptions,
) -> Result<Vec<VoigtPeak>> {
    let smooth = hist.smoothed(opts.smoothing_sigma_bins);
    let top = smooth.iter().copied().fold(0.0, f64::max);
    let mut maxima = local_maxima(&smooth, opts.min_prominence_fraction * top);
    if maxima.len() < n_peaks {
        return Err(input_err(format!(
            "found {} histogram maxima, fewer than the {n_peaks} requested peaks",
            maxima.len()
        )));
    }
    maxima.sort_by(|a, b| b.prominence.total_cmp(&a.prominence).then(a.index.cmp(&b.index)));
    maxima.truncate(n_peaks);
    maxima.sort_by_key(|m| m.index);

    let w = hist.bin_width();
    let centers = hist.centers();
    let kernel = opts.smoothing_sigma_bins * w;
    maxima
        .iter()
        .map(|m| {
            let half = 0.5 * m.height;
            let walk = |step: isize| {
                let mut i = m.index as isize;
                let mut prev = m.height;
                loop {
                    let next = i + step;
                    if next < 0 || next as usize >= smooth.len() {
                        break;
                    }
                    let v = smooth[next as usize];
                    if v < half || v > prev {
                        break;
                    }
                    prev = v;
                    i = next;
                }
                (i - m.index as isize).unsigned_abs() as f64 + 0.5
            };
            let hwhm = 0.5 * (walk(-1) + walk(1)) * w;
            let sigma_obs = hwhm / (2.0 * std::f64::consts::LN_2).sqrt();
            let sigma = (sigma_obs * sigma_obs - kernel * kernel).max(w * w).sqrt();
            let amplitude = m.height * (2.0 * std::f64::consts::PI).sqrt() * sigma_obs / w;
            VoigtPeak::new(centers[m.index], sigma, 0.3 * sigma, amplitude.max(1e-9))
        })
        .collect()
}

fn model_into(params: &[f64], xs: &[f64], w: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for p in params.chunks_exact(PARAMS_PER_PEAK) {
        add_peak(p, xs, w, out, 1.0);
    }
}

fn add_peak(p: &[f64], xs: &[f64], w: f64, out: &mut [f64], sign: f64) {
    let (c, s, g, a) = (p[0], p[1].abs(), p[2].abs(), p[3].abs());
    if s == 0.0 && g == 0.0 {
        return;
    }
    for (o, &x) in out.iter_mut().zip(xs) {
        *o += sign * w * a * voigt_density(x - c, s, g);
    }
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Solve `a x = b` for symmetric positive (semi)definite `a` by Cholesky.
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

pub fn fit_voigt_peaks(
    hist: &BlockadeHistogram,
    n_peaks: usize,
    init: Option<&[VoigtPeak]>,
) -> Result<FitResult> {
    fit_voigt_peaks_with(hist, n_peaks, init, &FitOptions::default())
}

pub fn fit_voigt_peaks_with(
    hist: &BlockadeHistogram,
    n_peaks: usize,
    init: Option<&[VoigtPeak]>,
    opts: &FitOptions,
) -> Result<FitResult> {
    if n_peaks == 0 {
        return Err(input_err("n_peaks must be at least 1"));
    }
    let nonzero = hist.counts.iter().filter(|&&c| c > 0).count();
    if nonzero < 4 * n_peaks {
        return Err(input_err(format!(
            "histogram has {nonzero} nonzero bins; fitting {n_peaks} peaks needs at least {}",
            4 * n_peaks
        )));
    }
    let start = match init {
        Some(p) if p.len() == n_peaks => p.to_vec(),
        Some(p) => {
            return Err(input_err(format!(
                "{} initial peaks supplied for {n_peaks} requested",
                p.len()
            )))
        }
        None => initial_peaks(hist, n_peaks, opts)?,
    };

    let xs = hist.centers();
    let y: Vec<f64> = hist.counts.iter().map(|&c| c as f64).collect();
    let bw = hist.bin_width();
    let m = xs.len();
    let np = PARAMS_PER_PEAK * n_peaks;
    let mut params: Vec<f64> = start
        .iter()
        .flat_map(|p| [p.center, p.sigma_g, p.gamma_l, p.amplitude])
        .collect();
    let typical: Vec<f64> = start
        .iter()
        .flat_map(|p| [bw, bw, bw, p.amplitude.max(1.0)])
        .collect();

    let mut model = vec![0.0; m];
    model_into(&params, &xs, bw, &mut model);
    let mut resid: Vec<f64> = model.iter().zip(&y).map(|(f, y)| f - y).collect();
    let mut cost = sum_sq(&resid);
    let y_norm = sum_sq(&y).sqrt();

    let mut lambda = 1e-3;
    let mut jac = vec![0.0; m * np];
    let mut col = vec![0.0; m];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        // Forward differences; each column only touches one peak's contribution.
        for j in 0..np {
            let peak = j / PARAMS_PER_PEAK;
            let base = &params[peak * PARAMS_PER_PEAK..(peak + 1) * PARAMS_PER_PEAK];
            let h = 1e-6 * params[j].abs().max(typical[j]);
            let mut bumped = [base[0], base[1], base[2], base[3]];
            bumped[j % PARAMS_PER_PEAK] += h;
            col.iter_mut().for_each(|v| *v = 0.0);
            add_peak(&bumped, &xs, bw, &mut col, 1.0);
            add_peak(base, &xs, bw, &mut col, -1.0);
            for i in 0..m {
                jac[i * np + j] = col[i] / h;
            }
        }
        let mut jtj = vec![0.0; np * np];
        let mut jtr = vec![0.0; np];
        for i in 0..m {
            let row = &jac[i * np..(i + 1) * np];
            for a in 0..np {
                jtr[a] += row[a] * resid[i];
                for b in 0..=a {
                    jtj[a * np + b] += row[a] * row[b];
                }
            }
        }
        for a in 0..np {
            for b in 0..a {
                jtj[b * np + a] = jtj[a * np + b];
            }
        }

        let mut accepted = false;
        let mut stalled = false;
        loop {
            let mut damped = jtj.clone();
            for a in 0..np {
                damped[a * np + a] += lambda * jtj[a * np + a].max(1e-12);
            }
            let neg: Vec<f64> = jtr.iter().map(|g| -g).collect();
            if let Some(step) = cholesky_solve(&damped, &neg, np) {
                let trial: Vec<f64> = params.iter().zip(&step).map(|(p, d)| p + d).collect();
                model_into(&trial, &xs, bw, &mut model);
                let trial_resid: Vec<f64> = model.iter().zip(&y).map(|(f, y)| f - y).collect();
                let trial_cost = sum_sq(&trial_resid);
                if trial_cost.is_finite() && trial_cost < cost {
                    let rel_drop = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
                    let step_small = step
                        .iter()
                        .zip(&typical)
                        .all(|(d, t)| d.abs() < 1e-10 * t.max(1e-300));
                    params = trial;
                    resid = trial_resid;
                    cost = trial_cost;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if rel_drop < 1e-10 || step_small {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= 4.0;
            if lambda > 1e16 {
                stalled = true;
                break;
            }
        }
        if converged || (stalled && !accepted) {
            converged = true;
            break;
        }
    }

    let relative_residual = cost.sqrt() / y_norm.max(f64::MIN_POSITIVE);
    if !converged {
        return Err(Error::NotConverged {
            iterations,
            residual: relative_residual,
        });
    }
    let mut peaks = params
        .chunks_exact(PARAMS_PER_PEAK)
        .map(|p| VoigtPeak::new(p[0], p[1].abs(), p[2].abs(), p[3].abs()))
        .collect::<Result<Vec<_>>>()?;
    peaks.sort_by(|a, b| a.center.total_cmp(&b.center));
    Ok(FitResult {
        peaks,
        relative_residual,
        iterations,
        converged,
        high_residual: relative_residual > opts.high_residual_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::histogram::histogram_from_values;

    #[test]
    fn recovers_exact_profile() {
        // Histogram counts follow a Voigt exactly (no sampling noise).
        let truth = VoigtPeak::new(0.5, 0.02, 0.01, 1e4).unwrap();
        let n = 200;
        let edges: Vec<f64> = (0..=n).map(|i| 0.2 + 0.6 * i as f64 / n as f64).collect();
        let w = edges[1] - edges[0];
        let counts: Vec<u64> = edges
            .windows(2)
            .map(|e| (crate::labeling::voigt_value(0.5 * (e[0] + e[1]), &truth) * w * 100.0).round() as u64)
            .collect();
        let hist = BlockadeHistogram {
            n_events: counts.iter().sum(),
            bin_edges: edges,
            counts,
        };
        let fit = fit_voigt_peaks(&hist, 1, None).unwrap();
        let p = fit.peaks[0];
        assert!((p.center - 0.5).abs() < 1e-4);
        assert!((p.sigma_g - 0.02).abs() < 1e-3);
        assert!((p.gamma_l - 0.01).abs() < 1e-3);
        assert!(!fit.high_residual);
    }

    #[test]
    fn errors_on_sparse_histogram_and_missing_maxima() {
        let hist = histogram_from_values(&[0.3, 0.31, 0.5], 16).unwrap();
        assert!(fit_voigt_peaks(&hist, 1, None).is_err());
        let vals: Vec<f64> = (0..400).map(|i| 0.4 + 0.2 * ((i * 37 % 400) as f64 / 400.0)).collect();
        let hist = histogram_from_values(&vals, 64).unwrap();
        assert!(fit_voigt_peaks(&hist, 5, None).is_err());
    }

    #[test]
    fn cholesky_small_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let x = cholesky_solve(&a, &[2.0, 1.0], 2).unwrap();
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-12);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-12);
    }
}
