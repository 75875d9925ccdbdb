//! Weight-only linear maps shared by every parametric layer.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::param::Param;
use crate::projections::factorize_dim;
use crate::scalar::Scalar;
use crate::tensor::{kernels, kronecker, normal_init, Rng, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    #[default]
    Full,
    Bilinear,
}

impl ProjectionMode {
    pub fn name(self) -> &'static str {
        match self {
            ProjectionMode::Full => "full",
            ProjectionMode::Bilinear => "bilinear",
        }
    }
}

/// `x -> x W` on row vectors, with `W` either stored densely or as
/// `kron(w1^T, w2)` where `w1: [k1, d1]` and `w2: [d2, k2]`.
#[derive(Clone, Debug, PartialEq)]
pub enum LinearMap<S = f64> {
    Full { weight: Param<S> },
    Bilinear { w1: Param<S>, w2: Param<S> },
}

impl<S: Scalar> LinearMap<S> {
    pub fn full(rng: &mut Rng, d: usize, k: usize, std: f64) -> Result<Self> {
        Ok(LinearMap::Full {
            weight: Param::weight("weight", normal_init(rng, &[d, k], std)?),
        })
    }

    pub fn bilinear(
        rng: &mut Rng,
        (d1, d2): (usize, usize),
        (k1, k2): (usize, usize),
        std: f64,
    ) -> Result<Self> {
        Ok(LinearMap::Bilinear {
            w1: Param::weight("w1", normal_init(rng, &[k1, d1], std)?),
            w2: Param::weight("w2", normal_init(rng, &[d2, k2], std)?),
        })
    }

    /// Bilinear map over the balanced factorizations of `d` and `k`.
    pub fn bilinear_balanced(rng: &mut Rng, d: usize, k: usize, std: f64) -> Result<Self> {
        Self::bilinear(rng, factorize_dim(d), factorize_dim(k), std)
    }

    pub fn mode(&self) -> ProjectionMode {
        match self {
            LinearMap::Full { .. } => ProjectionMode::Full,
            LinearMap::Bilinear { .. } => ProjectionMode::Bilinear,
        }
    }

    /// `(d1, d2)`; `(D, 1)` for a full map.
    pub fn input_factors(&self) -> (usize, usize) {
        match self {
            LinearMap::Full { weight } => (weight.value.shape()[0], 1),
            LinearMap::Bilinear { w1, w2 } => (w1.value.shape()[1], w2.value.shape()[0]),
        }
    }

    /// `(k1, k2)`; `(1, K)` for a full map.
    pub fn output_factors(&self) -> (usize, usize) {
        match self {
            LinearMap::Full { weight } => (1, weight.value.shape()[1]),
            LinearMap::Bilinear { w1, w2 } => (w1.value.shape()[0], w2.value.shape()[1]),
        }
    }

    pub fn in_dim(&self) -> usize {
        let (a, b) = self.input_factors();
        a * b
    }

    pub fn out_dim(&self) -> usize {
        let (a, b) = self.output_factors();
        a * b
    }

    /// Forward cost of one row, one multiply-accumulate counted as 2.
    pub fn flops_per_row(&self) -> usize {
        match self {
            LinearMap::Full { .. } => 2 * self.in_dim() * self.out_dim(),
            LinearMap::Bilinear { .. } => {
                let (d1, d2) = self.input_factors();
                let (k1, k2) = self.output_factors();
                2 * k1 * d1 * d2 + 2 * k1 * d2 * k2
            }
        }
    }

    /// `out[n, K] += x[n, D] W`.
    pub fn apply_rows(&self, x: &[S], out: &mut [S], n: usize) {
        match self {
            LinearMap::Full { weight } => {
                kernels::gemm(x, weight.value.data(), out, n, self.in_dim(), self.out_dim());
            }
            LinearMap::Bilinear { w1, w2 } => {
                let (d1, d2) = self.input_factors();
                let (k1, k2) = self.output_factors();
                let (din, dout) = (d1 * d2, k1 * k2);
                let mut tmp = vec![S::zero(); k1 * d2];
                for s in 0..n {
                    tmp.iter_mut().for_each(|v| *v = S::zero());
                    kernels::gemm(w1.value.data(), &x[s * din..(s + 1) * din], &mut tmp, k1, d1, d2);
                    kernels::gemm(&tmp, w2.value.data(), &mut out[s * dout..(s + 1) * dout], k1, d2, k2);
                }
            }
        }
    }

    /// Accumulates weight gradients for pre-activation gradients `delta[n, K]`
    /// and, when `dx` is given, adds the input gradient into it.
    pub fn backward_rows(&mut self, x: &[S], delta: &[S], dx: Option<&mut [S]>, n: usize) {
        let (din, dout) = (self.in_dim(), self.out_dim());
        match self {
            LinearMap::Full { weight } => {
                kernels::gemm_tn(x, delta, weight.grad.data_mut(), din, n, dout);
                if let Some(dx) = dx {
                    kernels::gemm_nt(delta, weight.value.data(), dx, n, dout, din);
                }
            }
            LinearMap::Bilinear { w1, w2 } => {
                let (d1, d2) = (w1.value.shape()[1], w2.value.shape()[0]);
                let (k1, k2) = (w1.value.shape()[0], w2.value.shape()[1]);
                let mut xw2 = vec![S::zero(); d1 * k2];
                let mut w1x = vec![S::zero(); k1 * d2];
                let mut u = vec![S::zero(); k1 * d2];
                let mut dx = dx;
                for s in 0..n {
                    let xs = &x[s * din..(s + 1) * din];
                    let ds = &delta[s * dout..(s + 1) * dout];
                    xw2.iter_mut().for_each(|v| *v = S::zero());
                    w1x.iter_mut().for_each(|v| *v = S::zero());
                    kernels::gemm(xs, w2.value.data(), &mut xw2, d1, d2, k2);
                    kernels::gemm(w1.value.data(), xs, &mut w1x, k1, d1, d2);
                    // gw1 += delta (x w2)^T ; gw2 += (w1 x)^T delta
                    kernels::gemm_nt(ds, &xw2, w1.grad.data_mut(), k1, k2, d1);
                    kernels::gemm_tn(&w1x, ds, w2.grad.data_mut(), d2, k1, k2);
                    if let Some(dx) = dx.as_deref_mut() {
                        // dx += w1^T (delta w2^T)
                        u.iter_mut().for_each(|v| *v = S::zero());
                        kernels::gemm_nt(ds, w2.value.data(), &mut u, k1, k2, d2);
                        kernels::gemm_tn(
                            w1.value.data(),
                            &u,
                            &mut dx[s * din..(s + 1) * din],
                            d1,
                            k1,
                            d2,
                        );
                    }
                }
            }
        }
    }

    /// Dense `[D, K]` matrix of the map.
    pub fn expand(&self) -> Result<Tensor<S>> {
        match self {
            LinearMap::Full { weight } => Ok(weight.value.clone()),
            LinearMap::Bilinear { w1, w2 } => kronecker(&w1.value.transpose()?, &w2.value),
        }
    }

    /// The equivalent full map.
    pub fn to_full(&self) -> Result<Self> {
        Ok(LinearMap::Full {
            weight: Param::weight("weight", self.expand()?),
        })
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        match self {
            LinearMap::Full { weight } => vec![weight],
            LinearMap::Bilinear { w1, w2 } => vec![w1, w2],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        match self {
            LinearMap::Full { weight } => vec![weight],
            LinearMap::Bilinear { w1, w2 } => vec![w1, w2],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
