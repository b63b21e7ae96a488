//! Softmax and categorical sampling over score vectors.

use crate::error::{Error, Result};
use crate::numkernel::RngStream;

/// Numerically stable softmax of `scores / temperature`.
///
/// The maximum score is subtracted before exponentiation, so arbitrary shifts
/// of the input leave the output unchanged and the result always sums to one.
pub fn softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("softmax over empty scores".into()));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / temperature));
    let exps: Vec<f64> = scores.iter().map(|s| (s / temperature - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Draws an index from a probability vector using a single uniform draw.
///
/// The vector must be non-negative and sum to one within 1e-6; rounding in
/// the cumulative sum falls through to the last index.
pub fn sample_categorical(probs: &[f64], rng: &mut RngStream) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::InvalidDistribution("empty probability vector".into()));
    }
    let mut sum = 0.0;
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::InvalidDistribution(format!("bad probability {p}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("probabilities sum to {sum}")));
    }
    let u = rng.next_uniform() * sum;
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.len() - 1)
}
