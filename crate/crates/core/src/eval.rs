//! Accuracy metrics, confusion matrices, occlusion saliency and report files.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::nnet::{Model, Tensor};
use crate::scaleogram::{bilinear_resize, pgm_bytes};

/// Published accuracies of the reference ResNet18 on real (unpublished)
/// measurements. Written next to our numbers in reports, never compared.
pub const REFERENCE_MACRO: f64 = 0.817;
pub const REFERENCE_MICRO: f64 = 0.815;
pub const REFERENCE_TOP10: f64 = 0.849;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean of per-class accuracies over classes present in the truth.
    pub macro_acc: f64,
    /// Fraction of correct predictions.
    pub micro_acc: f64,
    /// Mean accuracy of the ten most frequent true classes (ties by class id).
    pub top10: f64,
    /// `None` for classes absent from the truth.
    pub per_class: Vec<Option<f64>>,
    pub n_per_class: Vec<usize>,
    pub notes: Vec<String>,
}

fn check_labels(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(input_err(format!(
            "truth has {} labels, predictions {}",
            truth.len(),
            pred.len()
        )));
    }
    if let Some(&bad) = truth.iter().chain(pred).find(|&&l| l >= n_classes) {
        return Err(input_err(format!("label {bad} out of range for {n_classes} classes")));
    }
    Ok(())
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Correctly rounded (nearest, ties to even) value of `p / q` for `0 < p <= q < 2^126`.
fn ratio_to_f64(p: u128, q: u128) -> f64 {
    if p == q {
        return 1.0;
    }
    let mut r = p;
    let mut e = 0i32;
    while r < q {
        r <<= 1;
        e += 1;
    }
    let mut m: u64 = 1;
    r -= q;
    for _ in 0..52 {
        r <<= 1;
        m <<= 1;
        if r >= q {
            m |= 1;
            r -= q;
        }
    }
    r <<= 1;
    let round = r >= q;
    if round {
        r -= q;
    }
    if round && (r != 0 || m & 1 == 1) {
        m += 1;
    }
    m as f64 * f64::from_bits(((1023 - e - 52) as u64) << 52)
}

/// Mean of `c_i / n_i`, rounded once from the exact rational. `None` when the
/// common denominator overflows.
fn mean_of_ratios(parts: &[(u64, u64)]) -> Option<f64> {
    let mut l: u128 = 1;
    for &(_, n) in parts {
        let n = n as u128;
        l = (l / gcd(l, n)).checked_mul(n)?;
    }
    let mut num: u128 = 0;
    for &(c, n) in parts {
        num = num.checked_add((c as u128).checked_mul(l / n as u128)?)?;
    }
    let den = l.checked_mul(parts.len() as u128)?;
    if num == 0 {
        return Some(0.0);
    }
    let g = gcd(num, den);
    let (num, den) = (num / g, den / g);
    (den < 1 << 126).then(|| ratio_to_f64(num, den))
}

pub fn compute_metrics(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<MetricReport> {
    check_labels(truth, pred, n_classes)?;
    if truth.is_empty() {
        return Err(input_err("no samples to evaluate"));
    }
    let mut n = vec![0usize; n_classes];
    let mut correct = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        n[t] += 1;
        if t == p {
            correct[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = n
        .iter()
        .zip(&correct)
        .map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    let present: Vec<(u64, u64)> = (0..n_classes)
        .filter(|&c| n[c] > 0)
        .map(|c| (correct[c] as u64, n[c] as u64))
        .collect();
    let macro_acc = mean_of_ratios(&present).unwrap_or_else(|| {
        present.iter().map(|&(c, n)| c as f64 / n as f64).sum::<f64>() / present.len() as f64
    });
    let micro_acc = correct.iter().sum::<usize>() as f64 / truth.len() as f64;
    let mut ranked: Vec<usize> = (0..n_classes).filter(|&c| n[c] > 0).collect();
    ranked.sort_by(|&a, &b| n[b].cmp(&n[a]).then(a.cmp(&b)));
    ranked.truncate(10);
    let top10 = ranked.iter().map(|&c| per_class[c].unwrap()).sum::<f64>() / ranked.len() as f64;
    let mut notes = Vec::new();
    let absent: Vec<usize> = (0..n_classes).filter(|&c| n[c] == 0).collect();
    if !absent.is_empty() {
        notes.push(format!("classes absent from truth, excluded from macro: {absent:?}"));
    }
    if ranked.len() < 10 {
        notes.push(format!("top10 averaged over {} classes", ranked.len()));
    }
    Ok(MetricReport {
        macro_acc,
        micro_acc,
        top10,
        per_class,
        n_per_class: n,
        notes,
    })
}

/// `counts[true][pred]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    check_labels(truth, pred, n_classes)?;
    let mut counts = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

/// Rows divided by their sums; empty rows stay zero and are listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedConfusion {
    pub rows: Vec<Vec<f64>>,
    pub empty_rows: Vec<usize>,
}

pub fn row_normalize(m: &ConfusionMatrix) -> NormalizedConfusion {
    let mut empty_rows = Vec::new();
    let rows = m
        .counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let s: u64 = row.iter().sum();
            if s == 0 {
                empty_rows.push(i);
                vec![0.0; row.len()]
            } else {
                row.iter().map(|&c| c as f64 / s as f64).collect()
            }
        })
        .collect();
    NormalizedConfusion { rows, empty_rows }
}

/// Occlusion sensitivity of the `true_class` logit.
///
/// For each patch position (top-left corners on a `stride` grid) the patch is
/// replaced by the same pixels of `fill` and the drop of the true-class logit
/// is recorded. The grid of drops is bilinearly resized to the image size.
#[allow(clippy::too_many_arguments)]
pub fn occlusion_saliency(
    model: &Model<f32>,
    image: &[f32],
    height: usize,
    width: usize,
    true_class: usize,
    patch: (usize, usize),
    stride: usize,
    fill: &[f32],
) -> Result<Vec<f32>> {
    let (ph, pw) = patch;
    if image.len() != height * width || fill.len() != image.len() {
        return Err(Error::Shape("image and fill must both be height x width".into()));
    }
    if ph == 0 || pw == 0 || ph > height || pw > width || stride == 0 {
        return Err(input_err("patch must be non-empty, fit the image, and stride positive"));
    }
    if true_class >= model.n_classes() {
        return Err(input_err("true_class out of range"));
    }
    let to_tensor = |px: Vec<f32>, n: usize| Tensor {
        shape: vec![n, 1, height, width],
        data: px,
    };
    let c = model.n_classes();
    let base = model.forward(&to_tensor(image.to_vec(), 1))?.data[true_class];
    let tops: Vec<usize> = (0..=height - ph).step_by(stride).collect();
    let lefts: Vec<usize> = (0..=width - pw).step_by(stride).collect();
    let positions: Vec<(usize, usize)> = tops.iter().flat_map(|&t| lefts.iter().map(move |&l| (t, l))).collect();
    let drops: Vec<Result<Vec<f64>>> = positions
        .par_chunks(32)
        .map(|chunk| {
            let mut px = Vec::with_capacity(chunk.len() * image.len());
            for &(t, l) in chunk {
                let mut img = image.to_vec();
                for r in t..t + ph {
                    img[r * width + l..r * width + l + pw].copy_from_slice(&fill[r * width + l..r * width + l + pw]);
                }
                px.extend(img);
            }
            let logits = model.forward(&to_tensor(px, chunk.len()))?;
            Ok((0..chunk.len())
                .map(|i| (base - logits.data[i * c + true_class]) as f64)
                .collect())
        })
        .collect();
    let mut grid = Vec::with_capacity(positions.len());
    for d in drops {
        grid.extend(d?);
    }
    Ok(bilinear_resize(&grid, tops.len(), lefts.len(), height, width)?
        .into_iter()
        .map(|v| v as f32)
        .collect())
}

/// `metric,value,n,reference` rows: macro, micro, top10, then one row per class.
pub fn metrics_csv(r: &MetricReport) -> String {
    let mut s = String::from("metric,value,n,reference\n");
    let total: usize = r.n_per_class.iter().sum();
    s.push_str(&format!("macro,{:.6},{total},{REFERENCE_MACRO}\n", r.macro_acc));
    s.push_str(&format!("micro,{:.6},{total},{REFERENCE_MICRO}\n", r.micro_acc));
    s.push_str(&format!("top10,{:.6},{total},{REFERENCE_TOP10}\n", r.top10));
    for (c, (acc, n)) in r.per_class.iter().zip(&r.n_per_class).enumerate() {
        let v = acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        s.push_str(&format!("class_{c},{v},{n},\n"));
    }
    s
}

/// Counts with a header row of predicted classes; first column is the true class.
pub fn confusion_csv(m: &ConfusionMatrix) -> String {
    let mut s = String::from("true\\pred");
    for c in 0..m.n_classes {
        s.push_str(&format!(",{c}"));
    }
    s.push('\n');
    for (t, row) in m.counts.iter().enumerate() {
        s.push_str(&t.to_string());
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// Row-normalized confusion matrix as a grayscale image (1.0 is white).
pub fn confusion_pgm(m: &ConfusionMatrix) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.n_classes, m.n_classes).into_bytes();
    for row in row_normalize(m).rows {
        out.extend(row.iter().map(|&v| (v * 255.0).round() as u8));
    }
    out
}

/// Saliency heat map as a min-max scaled grayscale image.
pub fn saliency_pgm(map: &[f32], height: usize, width: usize) -> Vec<u8> {
    pgm_bytes(map, height, width)
}

/// Per-class counts keyed by class id.
pub fn class_histogram(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &l in labels {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}
