use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{input_err, Result};

/// 8x8 block-average pooling of a row-major `h x w` image (64 features).
pub fn pooled_features(img: &[f32], h: usize, w: usize) -> Vec<f32> {
    const P: usize = 8;
    let bounds = |n: usize, i: usize| {
        let lo = i * n / P;
        let hi = ((i + 1) * n / P).max(lo + 1).min(n);
        (lo.min(n - 1), hi)
    };
    let mut out = Vec::with_capacity(P * P);
    for br in 0..P {
        let (r0, r1) = bounds(h, br);
        for bc in 0..P {
            let (c0, c1) = bounds(w, bc);
            let mut s = 0.0f64;
            for r in r0..r1 {
                for c in c0..c1 {
                    s += img[r * w + c] as f64;
                }
            }
            out.push((s / ((r1 - r0) * (c1 - c0)) as f64) as f32);
        }
    }
    out
}

/// Euclidean k-nearest-neighbor majority vote. Ties between classes go to
/// the smaller summed distance, then to the smaller class id.
pub fn knn_predict(train: &[Vec<f32>], labels: &[usize], test: &[Vec<f32>], k: usize) -> Result<Vec<usize>> {
    if train.len() != labels.len() {
        return Err(input_err("train features and labels differ in length"));
    }
    if k == 0 || k % 2 == 0 {
        return Err(input_err("k must be odd and at least 1"));
    }
    if k > train.len() {
        return Err(input_err(format!("k = {k} exceeds the {} training points", train.len())));
    }
    Ok(test
        .par_iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let s: f64 = t.iter().zip(q).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                    (s.sqrt(), i)
                })
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < d.len() {
                d.select_nth_unstable_by(k - 1, cmp);
            }
            let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
            for &(dist, i) in &d[..k] {
                let e = votes.entry(labels[i]).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += dist;
            }
            votes
                .into_iter()
                .min_by(|(ca, (na, sa)), (cb, (nb, sb))| nb.cmp(na).then(sa.total_cmp(sb)).then(ca.cmp(cb)))
                .map(|(c, _)| c)
                .unwrap()
        })
        .collect())
}
