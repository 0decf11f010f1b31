//! Accuracy and expected calibration error.

use crate::error::{Error, Result};
use crate::tensor::softmax;

/// Default number of equal-width confidence bins.
pub const DEFAULT_ECE_BINS: usize = 15;

/// Expected calibration error over `(confidence, correct)` pairs.
///
/// Confidences are binned into `bins` equal-width intervals on `[0, 1]`
/// (a confidence of exactly 1 falls in the last bin). Each non-empty bin
/// contributes `|B| / total * |accuracy(B) - mean_confidence(B)|`.
pub fn ece(predictions: &[(f64, bool)], bins: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Parameter("ece of an empty prediction set".into()));
    }
    if bins == 0 {
        return Err(Error::Parameter("ece needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for &(c, ok) in predictions {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Parameter(format!("confidence {c} outside [0, 1]")));
        }
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        correct[b] += usize::from(ok);
    }
    let total = predictions.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let n = count[b] as f64;
            (n / total) * (correct[b] as f64 / n - conf_sum[b] / n).abs()
        })
        .sum())
}

/// Max-class probability and correctness for each row of `[B, C]` logits.
pub fn confidences(logits: &[f64], classes: usize, labels: &[usize]) -> Vec<(f64, bool)> {
    logits
        .chunks(classes)
        .zip(labels)
        .map(|(row, &y)| {
            let probs = softmax(row);
            let (arg, &p) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .unwrap();
            (p, arg == y)
        })
        .collect()
}

pub fn accuracy(predictions: &[(f64, bool)]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    predictions.iter().filter(|p| p.1).count() as f64 / predictions.len() as f64
}
