//! Cross-entropy with label smoothing.

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Mean over rows of `-Σ q · log softmax(logits)` with
/// `q = (1 - eps) · onehot + eps / K`. Returns the loss and its gradient with
/// respect to the logits.
pub fn ce_label_smoothing<S: Scalar>(logits: &[S], k: usize, truth: &[u32], eps: f64) -> Result<(S, Vec<S>)> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(alloc::format!(
            "label smoothing {eps} outside [0, 1)"
        )));
    }
    if k == 0 || logits.len() != truth.len() * k {
        return Err(shape_err!(
            "{} logits for {} targets over {} classes",
            logits.len(),
            truth.len(),
            k
        ));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("loss targets"));
    }
    let rows = truth.len();
    let off = S::of(eps / k as f64);
    let on = S::of(1.0 - eps) + off;
    let inv_rows = S::one() / S::of_usize(rows);
    let mut total = S::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &t) in logits.chunks(k).zip(truth) {
        let t = t as usize;
        if t >= k {
            return Err(Error::InvalidArgument(alloc::format!(
                "class id {t} outside {k} classes"
            )));
        }
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        for (j, &v) in row.iter().enumerate() {
            let q = if j == t { on } else { off };
            let log_p = v - log_z;
            total -= q * log_p;
            grad.push((log_p.exp() - q) * inv_rows);
        }
    }
    Ok((total * inv_rows, grad))
}
