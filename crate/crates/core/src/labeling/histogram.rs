use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::events::Event;

/// Uniform-bin histogram of relative blockade values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockadeHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub n_events: u64,
}

impl BlockadeHistogram {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_edges[1] - self.bin_edges[0]
    }

    pub fn centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Counts convolved with a normalized Gaussian kernel of `sigma_bins` bins.
    pub fn smoothed(&self, sigma_bins: f64) -> Vec<f64> {
        let radius = (3.0 * sigma_bins).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|k| (-0.5 * (k as f64 / sigma_bins).powi(2)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let n = self.counts.len() as isize;
        (0..n)
            .map(|i| {
                let mut acc = 0.0;
                for (j, w) in kernel.iter().enumerate() {
                    let idx = i + j as isize - radius;
                    if (0..n).contains(&idx) {
                        acc += w * self.counts[idx as usize] as f64;
                    }
                }
                acc / norm
            })
            .collect()
    }
}

pub const DEGENERATE_HALF_RANGE: f64 = 1e-3;

pub fn build_histogram(events: &[Event], n_bins: usize) -> Result<BlockadeHistogram> {
    let values: Vec<f64> = events.iter().map(|e| e.mean_rel_blockade).collect();
    histogram_from_values(&values, n_bins)
}

/// Uniform bins over `[min, max]` of the values; the last bin is closed.
pub fn histogram_from_values(values: &[f64], n_bins: usize) -> Result<BlockadeHistogram> {
    if values.is_empty() {
        return Err(input_err("cannot build a histogram from zero events"));
    }
    if n_bins < 8 {
        return Err(input_err("histogram needs at least 8 bins"));
    }
    if values.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
        return Err(input_err("relative blockade values must lie in (0, 1)"));
    }
    let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        let v = 0.5 * (lo + hi);
        lo = (v - DEGENERATE_HALF_RANGE).max(0.5 * v);
        hi = (v + DEGENERATE_HALF_RANGE).min(0.5 * (1.0 + v));
    }
    let width = (hi - lo) / n_bins as f64;
    let bin_edges: Vec<f64> = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; n_bins];
    for &v in values {
        let b = (((v - lo) / width).floor() as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    Ok(BlockadeHistogram {
        bin_edges,
        counts,
        n_events: values.len() as u64,
    })
}

/// Freedman–Diaconis bin count, clamped to `[8, 4096]`.
pub fn freedman_diaconis_bins(values: &[f64]) -> usize {
    if values.len() < 4 {
        return 8;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
    let iqr = q(0.75) - q(0.25);
    let range = v[v.len() - 1] - v[0];
    if iqr <= 0.0 || range <= 0.0 {
        return 8;
    }
    let h = 2.0 * iqr / (v.len() as f64).cbrt();
    ((range / h).ceil() as usize).clamp(8, 4096)
}

/// A local maximum of a smoothed curve with its topographic prominence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMax {
    pub index: usize,
    pub height: f64,
    pub prominence: f64,
}

/// Local maxima (plateaus reported at their left edge) with prominence at
/// least `min_prominence`, in index order.
pub fn local_maxima(y: &[f64], min_prominence: f64) -> Vec<LocalMax> {
    let n = y.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        // Extend across a plateau.
        let mut j = i;
        while j + 1 < n && y[j + 1] == y[i] {
            j += 1;
        }
        let left_lower = i == 0 || y[i - 1] < y[i];
        let right_lower = j + 1 == n || y[j + 1] < y[i];
        if left_lower && right_lower && y[i] > 0.0 {
            let h = y[i];
            let mut left_min = h;
            for k in (0..i).rev() {
                if y[k] > h {
                    break;
                }
                left_min = left_min.min(y[k]);
            }
            let mut right_min = h;
            for &v in &y[j + 1..] {
                if v > h {
                    break;
                }
                right_min = right_min.min(v);
            }
            let left_min = if i == 0 { 0.0 } else { left_min };
            let right_min = if j + 1 == n { 0.0 } else { right_min };
            let prominence = h - left_min.max(right_min);
            if prominence >= min_prominence {
                out.push(LocalMax {
                    index: i,
                    height: h,
                    prominence,
                });
            }
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_one_bin() {
        let h = histogram_from_values(&[0.4], 16).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.counts.iter().sum::<u64>(), 1);
        assert!(h.bin_edges.iter().all(|&e| e > 0.0 && e < 1.0));
        assert!(h.bin_edges.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn identical_values_share_a_bin() {
        let h = histogram_from_values(&[0.4, 0.4], 16).unwrap();
        assert_eq!(*h.counts.iter().max().unwrap(), 2);
    }

    #[test]
    fn counts_complete_and_extremes_binned() {
        let vals: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        let h = histogram_from_values(&vals, 10).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 99);
        assert_eq!(h.n_events, 99);
        assert_eq!(h.counts.len() + 1, h.bin_edges.len());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(histogram_from_values(&[], 16).is_err());
        assert!(histogram_from_values(&[0.5], 4).is_err());
        assert!(histogram_from_values(&[1.5], 16).is_err());
    }

    #[test]
    fn prominence_of_two_humps() {
        let y = [0.0, 1.0, 5.0, 1.0, 2.0, 3.0, 0.5, 0.0];
        let m = local_maxima(&y, 0.0);
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].index, m[0].prominence), (2, 5.0));
        assert_eq!((m[1].index, m[1].prominence), (5, 2.0));
        assert_eq!(local_maxima(&y, 2.5).len(), 1);
    }

    #[test]
    fn fd_bins_reasonable() {
        let vals: Vec<f64> = (0..1000).map(|i| 0.1 + 0.8 * i as f64 / 1000.0).collect();
        let b = freedman_diaconis_bins(&vals);
        assert!((8..=4096).contains(&b));
    }
}
