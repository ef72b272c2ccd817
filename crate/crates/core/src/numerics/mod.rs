//! Dense tensors, reverse-mode differentiation and the loss primitives.

mod optim;
mod tape;
mod tensor;

pub use optim::{minibatches, Sgd};
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::Tensor;

use crate::error::{contract, Error, Result};

/// Floor applied to predicted probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Tolerance on the unit-sum check for probability vectors.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Max-shifted softmax over a logit vector.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 1 || logits.len() < 2 {
        return Err(contract(format!(
            "softmax expects a vector with at least 2 entries, got shape {:?}",
            logits.shape()
        )));
    }
    logits.check_finite("softmax input")?;
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits.data(), &mut out);
    Tensor::new(vec![out.len()], out)
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Checks that `p` is a probability vector: finite, nonnegative, summing to one.
pub fn check_probability(p: &[f64], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &v in p {
        if !v.is_finite() {
            return Err(Error::InvalidValue(format!("{what} contains {v}")));
        }
        if v < 0.0 {
            return Err(contract(format!("{what} has a negative entry {v}")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(contract(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// `KL(target || pred)`; both arguments are floored at [`LOG_FLOOR`] inside
/// the logarithm, so `kl_div(p, p)` is exactly zero.
pub fn kl_div(target: &Tensor, pred: &Tensor) -> Result<f64> {
    if target.shape() != pred.shape() || target.shape().len() != 1 {
        return Err(contract(format!(
            "kl_div expects two vectors of equal length, got {:?} and {:?}",
            target.shape(),
            pred.shape()
        )));
    }
    check_probability(target.data(), "kl_div target")?;
    check_probability(pred.data(), "kl_div prediction")?;
    Ok(kl_terms(target.data(), pred.data()))
}

pub(crate) fn kl_terms(target: &[f64], pred: &[f64]) -> f64 {
    target
        .iter()
        .zip(pred)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &p)| t * (t.max(LOG_FLOOR).ln() - p.max(LOG_FLOOR).ln()))
        .sum()
}

/// `max(0, threshold - value)`.
pub fn hinge(threshold: f64, value: f64) -> f64 {
    (threshold - value).max(0.0)
}
