use crate::error::{Error, Result};
use crate::param::Param;
use crate::projections::{factorize_dim, Activation, BilinearProjection, FullProjection};
use crate::scalar::Scalar;
use crate::tensor::{Rng, Tensor};

use super::{activate, batch_of, missing_cache, relu_signature, LinearMap, Module, ProjectionMode};

/// Fully-connected layer. In bilinear mode the output is `alpha * K` wide:
/// `w1: [k1, d1]`, `w2: [d2, alpha * k2]`, bias `[k1, alpha * k2]`.
#[derive(Clone, Debug)]
pub struct Dense<S = f64> {
    in_dim: usize,
    base_out: usize,
    alpha: usize,
    activation: Activation,
    map: LinearMap<S>,
    bias: Param<S>,
    cache: Option<(Tensor<S>, Vec<S>)>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(
        rng: &mut Rng,
        mode: ProjectionMode,
        in_dim: usize,
        out_dim: usize,
        alpha: usize,
        activation: Activation,
        init_std: f64,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Param("dense dimensions must be positive".into()));
        }
        if alpha == 0 {
            return Err(Error::Param("alpha must be at least 1".into()));
        }
        let (map, bias_shape) = match mode {
            ProjectionMode::Full => {
                if alpha != 1 {
                    return Err(Error::Param(
                        "alpha only applies to bilinear projections".into(),
                    ));
                }
                (LinearMap::full(rng, in_dim, out_dim, init_std)?, vec![out_dim])
            }
            ProjectionMode::Bilinear => {
                let (k1, k2) = factorize_dim(out_dim);
                let map = LinearMap::bilinear(rng, factorize_dim(in_dim), (k1, alpha * k2), init_std)?;
                (map, vec![k1, alpha * k2])
            }
        };
        Ok(Self {
            in_dim,
            base_out: out_dim,
            alpha,
            activation,
            map,
            bias: Param::bias("bias", Tensor::zeros(&bias_shape)),
            cache: None,
        })
    }

    pub fn from_full(p: &FullProjection<S>, activation: Activation) -> Self {
        Self {
            in_dim: p.in_dim(),
            base_out: p.out_dim(),
            alpha: 1,
            activation,
            map: LinearMap::Full {
                weight: Param::weight("weight", p.weight.clone()),
            },
            bias: Param::bias("bias", p.bias.clone()),
            cache: None,
        }
    }

    /// Wraps an existing projection; `alpha` only labels the layer.
    pub fn from_bilinear(p: &BilinearProjection<S>, activation: Activation, alpha: usize) -> Result<Self> {
        let (d1, d2) = p.input_factors();
        let (k1, k2) = p.output_factors();
        if alpha == 0 || k2 % alpha != 0 {
            return Err(Error::Param(format!("alpha {alpha} does not divide k2 = {k2}")));
        }
        Ok(Self {
            in_dim: d1 * d2,
            base_out: k1 * k2 / alpha,
            alpha,
            activation,
            map: LinearMap::Bilinear {
                w1: Param::weight("w1", p.w1.clone()),
                w2: Param::weight("w2", p.w2.clone()),
            },
            bias: Param::bias("bias", p.bias.clone()),
            cache: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.map.out_dim()
    }

    pub fn base_out(&self) -> usize {
        self.base_out
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn map(&self) -> &LinearMap<S> {
        &self.map
    }

    pub fn bias(&self) -> &Param<S> {
        &self.bias
    }

    pub fn to_full(&self) -> Result<Self> {
        Ok(Self {
            in_dim: self.in_dim,
            base_out: self.out_dim(),
            alpha: 1,
            activation: self.activation,
            map: self.map.to_full()?,
            bias: Param::bias("bias", self.bias.value.reshape(&[self.out_dim()])?),
            cache: None,
        })
    }

    fn pre_activation(&self, x: &Tensor<S>) -> Result<(usize, Vec<S>)> {
        let n = batch_of(x, &[self.in_dim], "dense")?;
        let k = self.out_dim();
        let mut pre = Vec::with_capacity(n * k);
        for _ in 0..n {
            pre.extend_from_slice(self.bias.value.data());
        }
        self.map.apply_rows(x.data(), &mut pre, n);
        Ok((n, pre))
    }
}

impl<S: Scalar> Module<S> for Dense<S> {
    fn kind(&self) -> &'static str {
        "dense"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input != [self.in_dim] {
            return Err(Error::shape(format!(
                "dense expects input [{}], got {input:?}",
                self.in_dim
            )));
        }
        Ok(vec![self.out_dim()])
    }

    fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, pre) = self.pre_activation(x)?;
        let out = Tensor::new(vec![n, self.out_dim()], activate(self.activation, &pre))?;
        self.cache = Some((x.clone(), pre));
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor<S>) -> Result<Tensor<S>> {
        let (x, pre) = self.cache.take().ok_or_else(|| missing_cache("dense"))?;
        let n = x.shape()[0];
        let k = self.out_dim();
        if upstream.shape() != [n, k] {
            return Err(Error::shape(format!(
                "dense upstream {:?} does not match output [{n}, {k}]",
                upstream.shape()
            )));
        }
        let phi = self.activation;
        let delta: Vec<S> = upstream
            .data()
            .iter()
            .zip(&pre)
            .map(|(&u, &z)| u * phi.derivative(z))
            .collect();
        let bias_grad = self.bias.grad.data_mut();
        for row in delta.chunks(k) {
            for (g, &d) in bias_grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![S::zero(); n * self.in_dim];
        self.map.backward_rows(x.data(), &delta, Some(&mut dx), n);
        Tensor::new(x.shape().to_vec(), dx)
    }

    fn params(&self) -> Vec<&Param<S>> {
        let mut p = self.map.params();
        p.push(&self.bias);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.map.params_mut();
        p.push(&mut self.bias);
        p
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn flops(&self, input: &[usize]) -> Result<usize> {
        Module::<S>::output_shape(self, input)?;
        let act = if self.activation == Activation::Identity {
            0
        } else {
            self.out_dim()
        };
        Ok(self.map.flops_per_row() + act)
    }

    fn mode(&self) -> Option<ProjectionMode> {
        Some(self.map.mode())
    }

    fn alpha(&self) -> usize {
        self.alpha
    }

    fn kinks(&self, out: &mut Vec<u64>) {
        if let (Activation::Relu, Some((_, pre))) = (self.activation, &self.cache) {
            relu_signature(pre, out);
        }
    }
}
