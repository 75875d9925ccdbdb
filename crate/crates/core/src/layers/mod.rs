//! Forward/backward layer units.
//!
//! Every layer takes a batch with a leading sample axis, caches what its
//! backward pass needs, and on `backward` sums parameter gradients over the
//! batch into its [`Param`] buffers and returns the input gradient.

mod conv;
mod dense;
mod embedding;
mod lstm;
mod map;
mod simple;

pub use conv::{col2im, conv_output_extent, im2col, Conv2d, ConvSpec, Padding};
pub use dense::Dense;
pub use embedding::Embedding;
pub use lstm::{Lstm, LstmState};
pub use map::{LinearMap, ProjectionMode};
pub use simple::{softmax_rows, ActivationLayer, Flatten, GlobalAvgPool, MaxPool, Softmax};

use crate::error::{Error, Result};
use crate::param::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait Module<S: Scalar> {
    /// Short type name used in reports (`dense`, `conv2d`, ...).
    fn kind(&self) -> &'static str;

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;

    fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>>;

    /// Consumes the forward cache. Errors when no forward pass is cached.
    fn backward(&mut self, upstream: &Tensor<S>) -> Result<Tensor<S>>;

    fn params(&self) -> Vec<&Param<S>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        Vec::new()
    }

    fn clear_cache(&mut self);

    /// Per-sample forward FLOPs for a per-sample input shape.
    fn flops(&self, input: &[usize]) -> Result<usize>;

    fn mode(&self) -> Option<ProjectionMode> {
        None
    }

    fn alpha(&self) -> usize {
        1
    }

    /// Appends a fingerprint of the piecewise branch taken by the last
    /// forward pass (relu signs, max-pool winners). Finite differences are
    /// only valid when it does not change under perturbation.
    fn kinks(&self, _out: &mut Vec<u64>) {}

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

#[derive(Clone, Debug)]
pub enum Layer<S = f64> {
    Dense(Dense<S>),
    Conv2d(Conv2d<S>),
    Embedding(Embedding<S>),
    Lstm(Lstm<S>),
    Activation(ActivationLayer<S>),
    MaxPool(MaxPool),
    GlobalAvgPool(GlobalAvgPool),
    Flatten(Flatten),
    Softmax(Softmax<S>),
}

macro_rules! delegate {
    ($self:ident, $l:ident => $e:expr) => {
        match $self {
            Layer::Dense($l) => $e,
            Layer::Conv2d($l) => $e,
            Layer::Embedding($l) => $e,
            Layer::Lstm($l) => $e,
            Layer::Activation($l) => $e,
            Layer::MaxPool($l) => $e,
            Layer::GlobalAvgPool($l) => $e,
            Layer::Flatten($l) => $e,
            Layer::Softmax($l) => $e,
        }
    };
}

impl<S: Scalar> Module<S> for Layer<S> {
    fn kind(&self) -> &'static str {
        delegate!(self, l => Module::<S>::kind(l))
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        delegate!(self, l => Module::<S>::output_shape(l, input))
    }

    fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        delegate!(self, l => l.forward(x))
    }

    fn backward(&mut self, upstream: &Tensor<S>) -> Result<Tensor<S>> {
        delegate!(self, l => l.backward(upstream))
    }

    fn params(&self) -> Vec<&Param<S>> {
        delegate!(self, l => l.params())
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        delegate!(self, l => l.params_mut())
    }

    fn clear_cache(&mut self) {
        delegate!(self, l => Module::<S>::clear_cache(l))
    }

    fn flops(&self, input: &[usize]) -> Result<usize> {
        delegate!(self, l => Module::<S>::flops(l, input))
    }

    fn mode(&self) -> Option<ProjectionMode> {
        delegate!(self, l => Module::<S>::mode(l))
    }

    fn alpha(&self) -> usize {
        delegate!(self, l => Module::<S>::alpha(l))
    }

    fn kinks(&self, out: &mut Vec<u64>) {
        delegate!(self, l => Module::<S>::kinks(l, out))
    }
}

impl<S: Scalar> Layer<S> {
    /// An equivalent layer with every bilinear map expanded to a full
    /// matrix; `None` for layers without a projection.
    pub fn to_full(&self) -> Result<Option<Layer<S>>> {
        Ok(match self {
            Layer::Dense(l) => Some(Layer::Dense(l.to_full()?)),
            Layer::Conv2d(l) => Some(Layer::Conv2d(l.to_full()?)),
            Layer::Embedding(l) => Some(Layer::Embedding(l.to_full()?)),
            Layer::Lstm(l) => Some(Layer::Lstm(l.to_full()?)),
            _ => None,
        })
    }
}

/// Splits `x` into `(batch, per-sample shape)` and checks the latter.
pub(crate) fn batch_of<S: Scalar>(x: &Tensor<S>, expected: &[usize], what: &str) -> Result<usize> {
    let shape = x.shape();
    if shape.is_empty() || shape[1..] != *expected {
        return Err(Error::shape(format!(
            "{what} expects per-sample shape {expected:?}, got batch shape {shape:?}"
        )));
    }
    Ok(shape[0])
}

pub(crate) fn missing_cache(what: &str) -> Error {
    Error::Usage(format!("{what}: backward called without a cached forward pass"))
}

/// Applies `phi` element-wise.
pub(crate) fn activate<S: Scalar>(
    phi: crate::projections::Activation,
    z: &[S],
) -> Vec<S> {
    z.iter().map(|&v| phi.apply(v)).collect()
}

pub(crate) fn relu_signature<S: Scalar>(z: &[S], out: &mut Vec<u64>) {
    out.extend(z.iter().map(|&v| {
        if v > S::zero() {
            2
        } else if v < S::zero() {
            0
        } else {
            1
        }
    }));
}
