//! Parameter-free layers: element-wise activations, pooling, flatten and
//! softmax.

use std::marker::PhantomData;

use crate::error::{Error, Result};
use crate::projections::Activation;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{missing_cache, relu_signature, Module};

fn per_sample<S: Scalar>(x: &Tensor<S>, what: &str) -> Result<(usize, Vec<usize>)> {
    match x.shape().split_first() {
        Some((&n, rest)) => Ok((n, rest.to_vec())),
        None => Err(Error::shape(format!("{what} expects a batch axis"))),
    }
}

fn check_upstream<S: Scalar>(up: &Tensor<S>, expected: &[usize], what: &str) -> Result<()> {
    if up.shape() != expected {
        return Err(Error::shape(format!(
            "{what} upstream {:?} does not match output {expected:?}",
            up.shape()
        )));
    }
    Ok(())
}

/// Element-wise nonlinearity as a standalone layer.
#[derive(Clone, Debug)]
pub struct ActivationLayer<S = f64> {
    activation: Activation,
    cache: Option<Tensor<S>>,
}

impl<S: Scalar> ActivationLayer<S> {
    pub fn new(activation: Activation) -> Self {
        Self {
            activation,
            cache: None,
        }
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }
}

impl<S: Scalar> Module<S> for ActivationLayer<S> {
    fn kind(&self) -> &'static str {
        self.activation.name()
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        per_sample(x, self.activation.name())?;
        let out = self.activation.apply_tensor(x);
        self.cache = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| missing_cache(self.activation.name()))?;
        check_upstream(upstream, x.shape(), self.activation.name())?;
        let phi = self.activation;
        let data = upstream
            .data()
            .iter()
            .zip(x.data())
            .map(|(&u, &z)| u * phi.derivative(z))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn flops(&self, input: &[usize]) -> Result<usize> {
        Ok(match self.activation {
            Activation::Identity => 0,
            _ => input.iter().product(),
        })
    }

    fn kinks(&self, out: &mut Vec<u64>) {
        if let (Activation::Relu, Some(x)) = (self.activation, &self.cache) {
            relu_signature(x.data(), out);
        }
    }
}

/// 2x2 max pooling with stride 2 over `[N, H, W, C]`. Odd trailing rows or
/// columns are dropped. Ties go to the first element in row-major order.
#[derive(Clone, Debug, Default)]
pub struct MaxPool {
    /// Input shape and, per output element, the flat input index it read.
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<S: Scalar> Module<S> for MaxPool {
    fn kind(&self) -> &'static str {
        "maxpool"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input[..] {
            [h, w, c] if h >= 2 && w >= 2 => Ok(vec![h / 2, w / 2, c]),
            _ => Err(Error::shape(format!(
                "maxpool expects [H, W, C] with H, W >= 2, got {input:?}"
            ))),
        }
    }

    fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, rest) = per_sample(x, "maxpool")?;
        let out_shape = Module::<S>::output_shape(self, &rest)?;
        let (h, w, c) = (rest[0], rest[1], rest[2]);
        let (oh, ow) = (out_shape[0], out_shape[1]);
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        let xd = x.data();
        for s in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = ((s * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                            if best == usize::MAX || xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                        out.push(xd[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        self.cache = Some((x.shape().to_vec(), argmax));
        let mut shape = vec![n];
        shape.extend(out_shape);
        Tensor::new(shape, out)
    }

    fn backward(&mut self, upstream: &Tensor<S>) -> Result<Tensor<S>> {
        let (shape, argmax) = self.cache.take().ok_or_else(|| missing_cache("maxpool"))?;
        if upstream.len() != argmax.len() {
            return Err(Error::shape(format!(
                "maxpool upstream {:?} does not match cached output",
                upstream.shape()
            )));
        }
        let mut dx = Tensor::zeros(&shape);
        let d = dx.data_mut();
        for (&idx, &u) in argmax.iter().zip(upstream.data()) {
            d[idx] += u;
        }
        Ok(dx)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Three comparisons per output element.
    fn flops(&self, input: &[usize]) -> Result<usize> {
        let out = Module::<S>::output_shape(self, input)?;
        Ok(3 * out.iter().product::<usize>())
    }

    fn kinks(&self, out: &mut Vec<u64>) {
        if let Some((_, argmax)) = &self.cache {
            out.extend(argmax.iter().map(|&i| i as u64));
        }
    }
}

/// Averages `[N, H, W, C]` over the spatial axes to `[N, C]`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    cache: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<S: Scalar> Module<S> for GlobalAvgPool {
    fn kind(&self) -> &'static str {
        "gap"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input[..] {
            [h, w, c] if h * w > 0 => Ok(vec![c]),
            _ => Err(Error::shape(format!("gap expects [H, W, C], got {input:?}"))),
        }
    }

    fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, rest) = per_sample(x, "gap")?;
        Module::<S>::output_shape(self, &rest)?;
        let (hw, c) = (rest[0] * rest[1], rest[2]);
        let scale = S::of(1.0 / hw as f64);
        let mut out = vec![S::zero(); n * c];
        for s in 0..n {
            let acc = &mut out[s * c..(s + 1) * c];
            for p in 0..hw {
                let o = (s * hw + p) * c;
                for (a, &v) in acc.iter_mut().zip(&x.data()[o..o + c]) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a *= scale);
        }
        self.cache = Some(x.shape().to_vec());
        Tensor::new(vec![n, c], out)
    }

    fn backward(&mut self, upstream: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = self.cache.take().ok_or_else(|| missing_cache("gap"))?;
        let (n, hw, c) = (shape[0], shape[1] * shape[2], shape[3]);
        check_upstream(upstream, &[n, c], "gap")?;
        let scale = S::of(1.0 / hw as f64);
        let mut dx = Vec::with_capacity(n * hw * c);
        for s in 0..n {
            for _ in 0..hw {
                dx.extend(upstream.row(s).iter().map(|&u| u * scale));
            }
        }
        Tensor::new(shape, dx)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn flops(&self, input: &[usize]) -> Result<usize> {
        Module::<S>::output_shape(self, input)?;
        Ok(input.iter().product())
    }
}

/// Collapses every per-sample axis into one.
#[derive(Clone, Debug, Default)]
pub struct Flatten {
    cache: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<S: Scalar> Module<S> for Flatten {
    fn kind(&self) -> &'static str {
        "flatten"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(vec![input.iter().product()])
    }

    fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, rest) = per_sample(x, "flatten")?;
        self.cache = Some(x.shape().to_vec());
        x.reshape(&[n, rest.iter().product()])
    }

    fn backward(&mut self, upstream: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = self.cache.take().ok_or_else(|| missing_cache("flatten"))?;
        upstream.reshape(&shape)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn flops(&self, _input: &[usize]) -> Result<usize> {
        Ok(0)
    }
}

/// Softmax over the last axis of each row, with max subtraction.
pub fn softmax_rows<S: Scalar>(x: &[S], width: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - max).exp()));
        let total: S = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Softmax over the last axis.
#[derive(Clone, Debug, Default)]
pub struct Softmax<S = f64> {
    cache: Option<Tensor<S>>,
    _scalar: PhantomData<S>,
}

impl<S: Scalar> Softmax<S> {
    pub fn new() -> Self {
        Self {
            cache: None,
            _scalar: PhantomData,
        }
    }
}

impl<S: Scalar> Module<S> for Softmax<S> {
    fn kind(&self) -> &'static str {
        "softmax"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input.last() {
            Some(&c) if c > 0 => Ok(input.to_vec()),
            _ => Err(Error::shape(format!("softmax expects a class axis, got {input:?}"))),
        }
    }

    fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (_, rest) = per_sample(x, "softmax")?;
        Module::<S>::output_shape(self, &rest)?;
        let width = *x.shape().last().unwrap_or(&1);
        let out = Tensor::new(x.shape().to_vec(), softmax_rows(x.data(), width))?;
        self.cache = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor<S>) -> Result<Tensor<S>> {
        let p = self.cache.take().ok_or_else(|| missing_cache("softmax"))?;
        check_upstream(upstream, p.shape(), "softmax")?;
        let width = *p.shape().last().unwrap_or(&1);
        let mut dx = Vec::with_capacity(p.len());
        for (pr, ur) in p.data().chunks(width).zip(upstream.data().chunks(width)) {
            let dot: S = pr.iter().zip(ur).map(|(&a, &b)| a * b).sum();
            dx.extend(pr.iter().zip(ur).map(|(&a, &u)| a * (u - dot)));
        }
        Tensor::new(p.shape().to_vec(), dx)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// exp, sum and divide: three per element.
    fn flops(&self, input: &[usize]) -> Result<usize> {
        Ok(3 * input.iter().product::<usize>())
    }
}
