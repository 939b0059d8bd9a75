use crate::error::{argument, shape, Result};
use crate::tensor::{Real, Tensor2};

/// Row-wise softmax, computed with the row maximum subtracted.
pub fn softmax<T: Real>(logits: &Tensor2<T>) -> Tensor2<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`, and its gradient
/// `(softmax - onehot) / rows`.
pub fn cross_entropy<T: Real>(logits: &Tensor2<T>, labels: &[usize]) -> Result<(f64, Tensor2<T>)> {
    if labels.len() != logits.rows() || logits.rows() == 0 {
        return Err(shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    let c = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(argument(format!("label {bad} out of range for {c} classes")));
    }
    let n = logits.rows();
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        loss += lse - row[l].as_f64();
        let g = grad.row_mut(r);
        g[l] -= T::one();
    }
    let inv = T::from_f64(1.0 / n as f64);
    for v in grad.data_mut() {
        *v *= inv;
    }
    Ok((loss / n as f64, grad))
}
