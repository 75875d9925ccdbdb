//! Loss functions and weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::softmax_rows;
use crate::param::{Param, ParamKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    Mse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Mse => "mse",
        }
    }
}

/// Objective value with its gradient w.r.t. the network output.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<S = f64> {
    pub value: S,
    pub grad: Tensor<S>,
}

/// `J = 1/2 ||h - y||^2 + lambda/2 * sum ||w||^2`, un-normalized.
///
/// The gradient is w.r.t. `h`; the decay gradient is added separately by
/// [`apply_weight_decay`].
pub fn mse_weight_decay<S: Scalar>(
    h: &Tensor<S>,
    y: &Tensor<S>,
    lambda: S,
    weights: &[&Tensor<S>],
) -> Result<LossValue<S>> {
    if lambda < S::zero() {
        return Err(Error::Param("weight decay must be non-negative".into()));
    }
    let grad = h.sub(y)?;
    let half = S::of(0.5);
    let decay: S = weights.iter().map(|w| w.sum_squares()).sum();
    Ok(LossValue {
        value: half * grad.sum_squares() + half * lambda * decay,
        grad,
    })
}

/// Batch-mean squared error, `1/N * 1/2 ||h - y||^2`, without decay.
pub fn mse_mean<S: Scalar>(h: &Tensor<S>, y: &Tensor<S>) -> Result<LossValue<S>> {
    let n = h.shape().first().copied().unwrap_or(1).max(1);
    let inv = S::of(1.0 / n as f64);
    let raw = mse_weight_decay(h, y, S::zero(), &[])?;
    Ok(LossValue {
        value: raw.value * inv,
        grad: raw.grad.scale(inv),
    })
}

/// Batch-mean cross-entropy of `softmax(logits)` against integer labels.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<LossValue<S>> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "cross_entropy: {n} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index {
            what: "class label",
            index: bad,
            bound: c,
        });
    }
    let mut grad = softmax_rows(logits.data(), c);
    let inv = S::of(1.0 / n.max(1) as f64);
    let mut total = S::zero();
    for (s, &label) in labels.iter().enumerate() {
        let row = logits.row(s);
        // log-sum-exp with max subtraction, exact for large logit gaps
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        total += lse - row[label];
        grad[s * c + label] -= S::one();
    }
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(LossValue {
        value: total * inv,
        grad: Tensor::new(vec![n, c], grad)?,
    })
}

/// Adds `lambda * w` to the gradient of every weight (never biases) and
/// returns the penalty `lambda/2 * sum ||w||^2`.
pub fn apply_weight_decay<S: Scalar>(params: &mut [&mut Param<S>], lambda: S) -> S {
    if lambda == S::zero() {
        return S::zero();
    }
    let mut penalty = S::zero();
    for p in params.iter_mut().filter(|p| p.kind == ParamKind::Weight) {
        penalty += p.value.sum_squares();
        for (g, &w) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
            *g += lambda * w;
        }
    }
    S::of(0.5) * lambda * penalty
}
