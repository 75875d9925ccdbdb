use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether weight decay applies to a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// A trainable tensor with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S = f64> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            kind,
            value,
            grad,
        }
    }

    pub fn weight(name: impl Into<String>, value: Tensor<S>) -> Self {
        Self::new(name, ParamKind::Weight, value)
    }

    pub fn bias(name: impl Into<String>, value: Tensor<S>) -> Self {
        Self::new(name, ParamKind::Bias, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }
}
