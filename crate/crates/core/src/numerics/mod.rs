//! Dense `f64` arrays, stable scalar reductions, and a dynamically recorded
//! reverse-mode differentiation tape.
//!
//! The tape works at layer granularity: each recorded operation (matrix
//! product, graph mixing along the joint axis, depthwise temporal
//! convolution, activation shaping, ...) carries its own backward rule, so a
//! full forward/backward pass over a mini-batch stays a handful of nodes.

mod array;
mod gradcheck;
mod tape;

pub use array::DenseArray;
pub use gradcheck::{check_gradient, GradCheck};
pub use tape::{CustomBackward, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract error: {0}")]
    Contract(String),
}

/// `epsilon * ln(sum_i exp(v_i / epsilon))`, evaluated with max-subtraction.
pub fn logsumexp(v: &[f64], epsilon: f64) -> Result<f64, NumericsError> {
    if v.is_empty() {
        return Err(NumericsError::Domain("logsumexp of an empty vector".into()));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(NumericsError::Domain(format!(
            "temperature must be positive and finite, got {epsilon}"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::Domain(
            "logsumexp input contains a non-finite value".into(),
        ));
    }
    Ok(logsumexp_unchecked(v, epsilon))
}

pub(crate) fn logsumexp_unchecked(v: &[f64], epsilon: f64) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|x| ((x - max) / epsilon).exp()).sum();
    max + epsilon * sum.ln()
}

/// Softmax with max-subtraction.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

/// `-ln softmax(logits)[target]`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<f64, NumericsError> {
    if target >= logits.len() {
        return Err(NumericsError::Argument(format!(
            "target index {target} out of range for {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::Domain("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|x| (x - max).exp()).sum();
    Ok((max - logits[target]) + sum.ln())
}
