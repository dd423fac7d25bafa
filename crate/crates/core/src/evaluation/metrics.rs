//! Downstream metrics: MSE/MAE for forecasting, accuracy / macro-F1 /
//! Cohen's kappa for classification.
//!
//! Classification metrics are computed from integer confusion counts with a
//! single final division each, so fixed cases come out exact (e.g. the
//! binary TP=40/TN=40/FP=10/FN=10 case gives kappa = 0.6 exactly).

#![allow(clippy::needless_range_loop)]

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub mf1: f64,
    pub kappa: f64,
}

/// Accuracy, macro-averaged F1, and Cohen's kappa over labels in `[0, k)`.
///
/// Macro-F1 averages one-vs-rest F1 over all `k` classes of the label
/// universe; a class absent from both truth and prediction contributes 0.
/// Kappa uses the multiclass chance agreement `sum_k row_k * col_k / n^2`,
/// which reduces to the binary formula at `k = 2`. If chance agreement is 1
/// (both sides constant), kappa is reported as 0.
pub fn compute_classification_metrics(
    y_true: &[usize],
    y_pred: &[usize],
    k: usize,
) -> Result<ClassificationMetrics, EvalError> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(EvalError::LengthMismatch {
            left: y_true.len(),
            right: y_pred.len(),
        });
    }
    for (&label, what) in y_true.iter().zip(std::iter::repeat("label")) {
        if label >= k {
            return Err(EvalError::LabelOutOfRange { what, label, classes: k });
        }
    }
    for (&label, what) in y_pred.iter().zip(std::iter::repeat("prediction")) {
        if label >= k {
            return Err(EvalError::LabelOutOfRange { what, label, classes: k });
        }
    }

    let n = y_true.len() as u64;
    let mut agree = 0u64;
    let mut row = vec![0u64; k]; // true-label counts
    let mut col = vec![0u64; k]; // predicted-label counts
    let mut tp = vec![0u64; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        row[t] += 1;
        col[p] += 1;
        if t == p {
            agree += 1;
            tp[t] += 1;
        }
    }

    let acc = agree as f64 / n as f64;

    let mut f1_sum = 0.0;
    for c in 0..k {
        let fp = col[c] - tp[c];
        let fn_ = row[c] - tp[c];
        let denom = 2 * tp[c] + fp + fn_;
        if denom > 0 {
            f1_sum += (2 * tp[c]) as f64 / denom as f64;
        }
    }
    let mf1 = f1_sum / k as f64;

    // kappa = (n*agree - sum row*col) / (n^2 - sum row*col), all integers
    let chance: u128 = (0..k).map(|c| row[c] as u128 * col[c] as u128).sum();
    let num = (n as u128 * agree as u128) as i128 - chance as i128;
    let den = (n as u128 * n as u128) as i128 - chance as i128;
    let kappa = if den == 0 { 0.0 } else { num as f64 / den as f64 };

    Ok(ClassificationMetrics { acc, mf1, kappa })
}

/// Mean squared and mean absolute error over all elements, accumulated in
/// f64. Invariant under any permutation of the sample axis.
pub fn compute_forecast_metrics(y_true: &[f64], y_pred: &[f64]) -> Result<(f64, f64), EvalError> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(EvalError::LengthMismatch {
            left: y_true.len(),
            right: y_pred.len(),
        });
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    for (t, p) in y_true.iter().zip(y_pred) {
        let d = t - p;
        se += d * d;
        ae += d.abs();
    }
    let n = y_true.len() as f64;
    Ok((se / n, ae / n))
}

/// Break argmax ties toward the lowest class index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
