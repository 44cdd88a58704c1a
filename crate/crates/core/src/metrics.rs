//! Overall accuracy, mean class accuracy and mean IoU from a confusion matrix.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Percentages in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Metrics {
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
}

/// `counts[truth * k + pred]`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.k
    }

    pub fn add(&mut self, truth: u32, pred: u32) -> Result<()> {
        let (t, p) = (truth as usize, pred as usize);
        if t >= self.k || p >= self.k {
            return Err(Error::InvalidArgument(alloc::format!(
                "label pair ({truth}, {pred}) outside {} classes",
                self.k
            )));
        }
        self.counts[t * self.k + p] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class recall for classes present in the truth, and IoU for classes
    /// present in the truth or the prediction; absent classes are excluded
    /// from the means.
    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyInput("confusion matrix"));
        }
        let k = self.k;
        let mut correct = 0u64;
        let (mut acc_sum, mut acc_n) = (0.0, 0usize);
        let (mut iou_sum, mut iou_n) = (0.0, 0usize);
        for c in 0..k {
            let tp = self.get(c, c);
            let truth_c: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let pred_c: u64 = (0..k).map(|t| self.get(t, c)).sum();
            correct += tp;
            if truth_c > 0 {
                acc_sum += tp as f64 / truth_c as f64;
                acc_n += 1;
            }
            let union = truth_c + pred_c - tp;
            if union > 0 {
                iou_sum += tp as f64 / union as f64;
                iou_n += 1;
            }
        }
        Ok(Metrics {
            oa: 100.0 * correct as f64 / total as f64,
            macc: 100.0 * acc_sum / acc_n as f64,
            miou: 100.0 * iou_sum / iou_n as f64,
        })
    }
}

/// Index of the largest entry of each row (lowest index on ties).
pub fn argmax_rows<S: Scalar>(logits: &[S], k: usize) -> Vec<u32> {
    logits
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Metrics for predicted vs true labels over `n_classes`.
pub fn compute_metrics(pred: &[u32], truth: &[u32], n_classes: usize) -> Result<Metrics> {
    if pred.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    if pred.len() != truth.len() {
        return Err(shape_err!("{} predictions for {} labels", pred.len(), truth.len()));
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (&p, &t) in pred.iter().zip(truth) {
        cm.add(t, p)?;
    }
    cm.metrics()
}

/// Metrics from `R × K` logits (one row per cloud or per point).
pub fn compute_metrics_from_logits<S: Scalar>(logits: &Tensor<S>, truth: &[u32], n_classes: usize) -> Result<Metrics> {
    if logits.cols() != n_classes {
        return Err(shape_err!(
            "logits have {} columns for {} classes",
            logits.cols(),
            n_classes
        ));
    }
    compute_metrics(&argmax_rows(logits.data(), n_classes), truth, n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let y = [0, 1, 2, 2, 1];
        let m = compute_metrics(&y, &y, 3).unwrap();
        assert_eq!((m.oa, m.macc, m.miou), (100.0, 100.0, 100.0));
    }

    #[test]
    fn all_zero_prediction_on_balanced_truth() {
        let m = compute_metrics(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!((m.oa, m.macc, m.miou), (50.0, 50.0, 25.0));
    }

    #[test]
    fn single_sample() {
        let m = compute_metrics(&[0], &[0], 1).unwrap();
        assert_eq!((m.oa, m.macc, m.miou), (100.0, 100.0, 100.0));
    }

    #[test]
    fn errors() {
        assert!(compute_metrics(&[], &[], 2).is_err());
        assert!(compute_metrics(&[0], &[0, 1], 2).is_err());
        assert!(compute_metrics(&[3], &[0], 2).is_err());
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax_rows(&[1.0f32, 1.0, 0.0, 0.0, 2.0, 2.0], 3), vec![0, 1]);
    }
}
