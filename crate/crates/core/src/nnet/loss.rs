use super::{Scalar, Tensor};
use crate::error::{input_err, Error, Result};

/// Row-wise softmax of an `[N, C]` tensor, stabilized by max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape.len() != 2 {
        return Err(Error::Shape(format!("softmax expects [N, C], got {:?}", logits.shape)));
    }
    let c = logits.shape[1];
    let mut out = logits.clone();
    for row in out.data.chunks_mut(c.max(1)) {
        let m = row.iter().copied().fold(T::from_f64(f64::NEG_INFINITY), |a, b| if b > a { b } else { a });
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// Mean cross-entropy over the batch and its gradient `(softmax - onehot) / N`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    cross_entropy_with_denominator(logits, labels, labels.len())
}

/// Summed cross-entropy divided by `denom`, with the matching gradient.
///
/// Accumulating minibatches of one batch with `denom` = batch size gives the
/// same gradient as the whole batch at once.
pub fn cross_entropy_with_denominator<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    denom: usize,
) -> Result<(T, Tensor<T>)> {
    if logits.shape.len() != 2 || logits.shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} labels",
            logits.shape,
            labels.len()
        )));
    }
    if denom == 0 {
        return Err(input_err("cross-entropy denominator must be positive"));
    }
    let c = logits.shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(input_err(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = softmax_rows(logits)?;
    let scale = T::ONE / T::from_f64(denom as f64);
    let mut loss = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data[i * c..(i + 1) * c];
        let m = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v.to_f64() - m).exp()).sum::<f64>().ln();
        loss += lse - row[y].to_f64();
        let g = &mut grad.data[i * c..(i + 1) * c];
        g[y] -= T::ONE;
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok((T::from_f64(loss / denom as f64), grad))
}
