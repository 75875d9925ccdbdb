//! Full and bilinear affine maps.
//!
//! A full projection maps a row vector `x` of length `D` to `phi(x W + b)`
//! with `W: [D, K]`. A bilinear projection reshapes `x` into a `d1 x d2`
//! matrix and computes `phi(w1 x w2 + b)` with `w1: [k1, d1]`, `w2: [d2, k2]`
//! and a `k1 x k2` bias. With row-major reshaping the two agree exactly when
//! `W = kron(w1^T, w2)`, which [`expand_to_full`] materializes and every test
//! in the crate uses as the reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{flatten, hadamard, kronecker, matmul, normal_init, Rng, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Relu => {
                if z > S::zero() {
                    z
                } else {
                    S::zero()
                }
            }
        }
    }

    /// Derivative with respect to the pre-activation `z`. The relu
    /// subgradient at 0 is 0.
    #[inline]
    pub fn derivative<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Identity => S::one(),
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (S::one() - s)
            }
            Activation::Tanh => {
                let t = z.tanh();
                S::one() - t * t
            }
            Activation::Relu => {
                if z > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
        }
    }

    pub fn apply_tensor<S: Scalar>(self, z: &Tensor<S>) -> Tensor<S> {
        z.map(|v| self.apply(v))
    }

    pub fn derivative_tensor<S: Scalar>(self, z: &Tensor<S>) -> Tensor<S> {
        z.map(|v| self.derivative(v))
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// Most balanced exact factorization `d1 * d2 = dim` with `d1 <= d2`.
///
/// Primes factor as `(1, dim)`; callers decide whether to warn.
pub fn factorize_dim(dim: usize) -> (usize, usize) {
    assert!(dim >= 1, "factorize_dim: dimension must be positive");
    let mut d1 = (dim as f64).sqrt() as usize;
    // guard against float rounding on either side of the true root
    while d1 * d1 > dim {
        d1 -= 1;
    }
    while (d1 + 1) * (d1 + 1) <= dim {
        d1 += 1;
    }
    while !dim.is_multiple_of(d1) {
        d1 -= 1;
    }
    (d1, dim / d1)
}

/// True when `dim > 3` only factors as `(1, dim)`.
pub fn is_degenerate(dim: usize) -> bool {
    dim > 3 && factorize_dim(dim).0 == 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullProjection<S = f64> {
    /// `[D, K]`
    pub weight: Tensor<S>,
    /// `[K]`
    pub bias: Tensor<S>,
}

impl<S: Scalar> FullProjection<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        let (_, k) = weight.dims2()?;
        if bias.shape() != [k] {
            return Err(Error::shape(format!(
                "full projection bias {:?} does not match output dim {k}",
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn random(rng: &mut Rng, d: usize, k: usize, stddev: f64) -> Result<Self> {
        Self::new(normal_init(rng, &[d, k], stddev)?, Tensor::zeros(&[k]))
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BilinearProjection<S = f64> {
    /// `[k1, d1]`
    pub w1: Tensor<S>,
    /// `[d2, k2]`
    pub w2: Tensor<S>,
    /// `[k1, k2]`
    pub bias: Tensor<S>,
}

impl<S: Scalar> BilinearProjection<S> {
    pub fn new(w1: Tensor<S>, w2: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        let (k1, _) = w1.dims2()?;
        let (_, k2) = w2.dims2()?;
        if bias.shape() != [k1, k2] {
            return Err(Error::shape(format!(
                "bilinear bias {:?} does not match output factors [{k1}, {k2}]",
                bias.shape()
            )));
        }
        Ok(Self { w1, w2, bias })
    }

    /// Random factors for input `(d1, d2)` and output `(k1, k2)`, zero bias.
    pub fn random(
        rng: &mut Rng,
        (d1, d2): (usize, usize),
        (k1, k2): (usize, usize),
        stddev: f64,
    ) -> Result<Self> {
        let w1 = normal_init(rng, &[k1, d1], stddev)?;
        let w2 = normal_init(rng, &[d2, k2], stddev)?;
        Self::new(w1, w2, Tensor::zeros(&[k1, k2]))
    }

    pub fn input_factors(&self) -> (usize, usize) {
        (self.w1.shape()[1], self.w2.shape()[0])
    }

    pub fn output_factors(&self) -> (usize, usize) {
        (self.w1.shape()[0], self.w2.shape()[1])
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.w2.len() + self.bias.len()
    }

    fn check_input(&self, xm: &Tensor<S>) -> Result<()> {
        let (d1, d2) = self.input_factors();
        if xm.shape() != [d1, d2] {
            return Err(Error::shape(format!(
                "bilinear input {:?} does not match factors [{d1}, {d2}]",
                xm.shape()
            )));
        }
        Ok(())
    }

    /// Pre-activation `w1 xm w2 + b`.
    pub fn pre_activation(&self, xm: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(xm)?;
        matmul(&matmul(&self.w1, xm)?, &self.w2)?.add(&self.bias)
    }
}

/// `phi(x W + b)` for a single row vector `x`.
pub fn full_forward<S: Scalar>(
    p: &FullProjection<S>,
    x: &Tensor<S>,
    phi: Activation,
) -> Result<Tensor<S>> {
    if x.shape() != [p.in_dim()] {
        return Err(Error::shape(format!(
            "full projection expects input [{}], got {:?}",
            p.in_dim(),
            x.shape()
        )));
    }
    let row = x.reshape(&[1, p.in_dim()])?;
    let z = matmul(&row, &p.weight)?.into_reshape(&[p.out_dim()])?;
    Ok(phi.apply_tensor(&z.add(&p.bias)?))
}

/// `phi(w1 xm w2 + b)` for a matrix-shaped input.
pub fn bilinear_forward<S: Scalar>(
    p: &BilinearProjection<S>,
    xm: &Tensor<S>,
    phi: Activation,
) -> Result<Tensor<S>> {
    Ok(phi.apply_tensor(&p.pre_activation(xm)?))
}

/// The equivalent full projection: `W = kron(w1^T, w2)`, `b = flatten(bias)`.
pub fn expand_to_full<S: Scalar>(p: &BilinearProjection<S>) -> Result<FullProjection<S>> {
    let weight = kronecker(&p.w1.transpose()?, &p.w2)?;
    FullProjection::new(weight, flatten(&p.bias)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BilinearGrads<S = f64> {
    pub w1: Tensor<S>,
    pub w2: Tensor<S>,
    pub bias: Tensor<S>,
    /// Gradient with respect to the matrix-shaped input.
    pub input: Tensor<S>,
}

/// Gradients of a bilinear projection given `upstream = dJ/dh` at its
/// post-activation output. Weight decay is not included.
pub fn bilinear_backward<S: Scalar>(
    p: &BilinearProjection<S>,
    xm: &Tensor<S>,
    phi: Activation,
    upstream: &Tensor<S>,
) -> Result<BilinearGrads<S>> {
    let z = p.pre_activation(xm)?;
    if upstream.shape() != z.shape() {
        return Err(Error::shape(format!(
            "upstream {:?} does not match output {:?}",
            upstream.shape(),
            z.shape()
        )));
    }
    let delta = hadamard(upstream, &phi.derivative_tensor(&z))?;
    bilinear_delta_backward(p, xm, &delta)
}

/// Backward pass from the pre-activation gradient `delta`:
/// `gw1 = delta (xm w2)^T`, `gw2 = (w1 xm)^T delta`, `gb = delta`,
/// `gx = w1^T delta w2^T`.
pub fn bilinear_delta_backward<S: Scalar>(
    p: &BilinearProjection<S>,
    xm: &Tensor<S>,
    delta: &Tensor<S>,
) -> Result<BilinearGrads<S>> {
    p.check_input(xm)?;
    let xw2 = matmul(xm, &p.w2)?;
    let w1x = matmul(&p.w1, xm)?;
    Ok(BilinearGrads {
        w1: matmul(delta, &xw2.transpose()?)?,
        w2: matmul(&w1x.transpose()?, delta)?,
        bias: delta.clone(),
        input: matmul(&matmul(&p.w1.transpose()?, delta)?, &p.w2.transpose()?)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    Full,
    Bilinear,
    /// Circulant projection or the fast Johnson-Lindenstrauss transform;
    /// both are generated by a single length-`D` vector.
    CirculantOrJl,
}

/// Number of free weights (no bias) of a `D -> K` mapping.
pub fn freedom_degree(kind: MappingKind, d: usize, k: usize) -> usize {
    match kind {
        MappingKind::Full => d * k,
        MappingKind::Bilinear => {
            let (d1, d2) = factorize_dim(d);
            let (k1, k2) = factorize_dim(k);
            k1 * d1 + d2 * k2
        }
        MappingKind::CirculantOrJl => d,
    }
}
