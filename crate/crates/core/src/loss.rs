//! Softmax cross-entropy over beam classes.

use crate::error::{Error, Result};
use crate::scalar::{r64, Real};
use crate::tensor::Tensor;

/// Row-wise softmax.
pub fn softmax<R: Real>(logits: &Tensor<R>) -> Tensor<R> {
    let (n, m) = (logits.rows(), logits.cols());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(R::neg_infinity(), R::max);
        let exps: Vec<R> = row.iter().map(|&v| (v - max).exp()).collect();
        let denom: R = exps.iter().cloned().sum();
        out.extend(exps.into_iter().map(|e| e / denom));
    }
    Tensor::from_parts(vec![n, m], out)
}

/// Mean cross-entropy `-(1/N) Σ_n Σ_m target·log softmax(logits)` with its
/// gradient `(softmax - target)/N` with respect to the logits.
///
/// `targets` rows must each sum to 1 (one-hot or soft labels).
pub fn softmax_cross_entropy<R: Real>(
    logits: &Tensor<R>,
    targets: &Tensor<R>,
) -> Result<(R, Tensor<R>)> {
    if logits.shape() != targets.shape() {
        return Err(Error::input(format!(
            "logits shape {:?} vs targets shape {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let (n, m) = (logits.rows(), logits.cols());
    let tol = r64::<R>(1e-6);
    for i in 0..n {
        let s: R = targets.row(i).iter().cloned().sum();
        if (s - R::one()).abs() > tol {
            return Err(Error::input(format!("target row {i} sums to {s}, expected 1")));
        }
    }
    let inv_n = r64::<R>(1.0 / n as f64);
    let probs = softmax(logits);
    let mut loss = R::zero();
    let mut grad = Vec::with_capacity(n * m);
    for i in 0..n {
        let lrow = logits.row(i);
        let max = lrow.iter().cloned().fold(R::neg_infinity(), R::max);
        let log_denom: R = lrow.iter().map(|&v| (v - max).exp()).sum::<R>().ln();
        let trow = targets.row(i);
        let prow = probs.row(i);
        for j in 0..m {
            let log_p = lrow[j] - max - log_denom;
            loss -= trow[j] * log_p;
            grad.push((prow[j] - trow[j]) * inv_n);
        }
    }
    Ok((loss * inv_n, Tensor::from_parts(vec![n, m], grad)))
}

/// One-hot target rows from 1-based class labels.
pub fn one_hot<R: Real>(labels: &[usize], classes: usize) -> Result<Tensor<R>> {
    let mut values = vec![R::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l < 1 || l > classes {
            return Err(Error::input(format!("label {l} outside 1..={classes}")));
        }
        values[i * classes + (l - 1)] = R::one();
    }
    Ok(Tensor::from_parts(vec![labels.len(), classes], values))
}

/// Row argmax as a 1-based label, ties broken toward the lowest index.
pub fn argmax_label<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best + 1
}
