//! Softmax cross-entropy over the channel axis.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Mean softmax cross-entropy and its gradient with respect to `scores`.
///
/// `scores` is `[B, C, ...]`, `targets` holds one class index per
/// `(batch, position)` in row-major order. With class weights the loss is
/// `sum(w[t] * nll) / sum(w[t])`.
pub fn softmax_cross_entropy<T: Scalar>(
    scores: &Tensor<T>,
    targets: &[u8],
    class_weights: Option<&[f64]>,
) -> Result<(f64, Tensor<T>)> {
    let (b, c, s) = (scores.batch(), scores.channels(), scores.spatial());
    if targets.len() != b * s {
        return Err(Error::Shape(format!(
            "{} targets for {} scored positions",
            targets.len(),
            b * s
        )));
    }
    if let Some(w) = class_weights {
        if w.len() != c {
            return Err(Error::InvalidArgument(format!(
                "{} class weights for {c} classes",
                w.len()
            )));
        }
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(Error::InvalidArgument(format!(
            "target class {bad} out of range for {c} classes"
        )));
    }
    let mut grad = Tensor::zeros(scores.shape());
    let mut total = 0.0;
    let mut norm = 0.0;
    let mut probs = vec![0.0f64; c];
    for bi in 0..b {
        let x = scores.item(bi);
        let g = grad.item_mut(bi);
        for p in 0..s {
            let t = targets[bi * s + p] as usize;
            let w = class_weights.map_or(1.0, |w| w[t]);
            let max = (0..c).map(|k| x[k * s + p].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, pk) in probs.iter_mut().enumerate() {
                *pk = (x[k * s + p].as_f64() - max).exp();
                z += *pk;
            }
            total += w * (z.ln() - (x[t * s + p].as_f64() - max));
            norm += w;
            for (k, pk) in probs.iter().enumerate() {
                let target = if k == t { 1.0 } else { 0.0 };
                g[k * s + p] = T::from_f64_lossy(w * (pk / z - target));
            }
        }
    }
    if norm <= 0.0 {
        return Ok((0.0, Tensor::zeros(scores.shape())));
    }
    let inv = T::from_f64_lossy(1.0 / norm);
    grad.data_mut().iter_mut().for_each(|v| *v *= inv);
    let loss = total / norm;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            layer: "loss".into(),
        });
    }
    Ok((loss, grad))
}

/// Inverse-frequency weights `N / (C * n_c)`; classes never seen get the
/// largest observed weight.
pub fn inverse_frequency_weights(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let c = counts.len() as f64;
    let raw: Vec<Option<f64>> = counts
        .iter()
        .map(|&n| (n > 0).then(|| total as f64 / (c * n as f64)))
        .collect();
    let fallback = raw.iter().flatten().copied().fold(1.0, f64::max);
    raw.into_iter().map(|w| w.unwrap_or(fallback)).collect()
}

/// Per-position argmax over the channel axis.
pub fn argmax_channels<T: Scalar>(scores: &Tensor<T>) -> Vec<u8> {
    let (b, c, s) = (scores.batch(), scores.channels(), scores.spatial());
    let mut out = Vec::with_capacity(b * s);
    for bi in 0..b {
        let x = scores.item(bi);
        for p in 0..s {
            let mut best = 0;
            for k in 1..c {
                if x[k * s + p] > x[best * s + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
