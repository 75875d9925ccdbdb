use crate::error::{Error, Result};
use crate::param::Param;
use crate::projections::factorize_dim;
use crate::scalar::Scalar;
use crate::tensor::{Rng, Tensor};

use super::{missing_cache, LinearMap, Module, ProjectionMode};

/// Token embedding. In bilinear mode the `V x alpha*E` table is
/// `kron(w1^T, w2)` with `w1: [e1, v1]`, `w2: [v2, e2]`; a lookup builds
/// only the requested row.
#[derive(Clone, Debug)]
pub struct Embedding<S = f64> {
    vocab: usize,
    base_dim: usize,
    alpha: usize,
    map: LinearMap<S>,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl<S: Scalar> Embedding<S> {
    pub fn new(
        rng: &mut Rng,
        mode: ProjectionMode,
        vocab: usize,
        dim: usize,
        alpha: usize,
        init_std: f64,
    ) -> Result<Self> {
        if vocab == 0 || dim == 0 {
            return Err(Error::Param("embedding extents must be positive".into()));
        }
        if alpha == 0 {
            return Err(Error::Param("alpha must be at least 1".into()));
        }
        let map = match mode {
            ProjectionMode::Full => {
                if alpha != 1 {
                    return Err(Error::Param(
                        "alpha only applies to bilinear projections".into(),
                    ));
                }
                LinearMap::full(rng, vocab, dim, init_std)?
            }
            ProjectionMode::Bilinear => {
                LinearMap::bilinear(rng, factorize_dim(vocab), factorize_dim(alpha * dim), init_std)?
            }
        };
        Ok(Self {
            vocab,
            base_dim: dim,
            alpha,
            map,
            cache: None,
        })
    }

    pub fn from_map(map: LinearMap<S>, alpha: usize) -> Self {
        Self {
            vocab: map.in_dim(),
            base_dim: map.out_dim() / alpha.max(1),
            alpha,
            map,
            cache: None,
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Effective embedding width.
    pub fn dim(&self) -> usize {
        self.map.out_dim()
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn map(&self) -> &LinearMap<S> {
        &self.map
    }

    pub fn to_full(&self) -> Result<Self> {
        Ok(Self {
            vocab: self.vocab,
            base_dim: self.dim(),
            alpha: 1,
            map: self.map.to_full()?,
            cache: None,
        })
    }

    /// Writes the embedding of `id` into `out`.
    pub fn lookup_into(&self, id: usize, out: &mut [S]) -> Result<()> {
        if id >= self.vocab {
            return Err(Error::Index {
                what: "token id",
                index: id,
                bound: self.vocab,
            });
        }
        match &self.map {
            LinearMap::Full { weight } => {
                let e = self.dim();
                out.copy_from_slice(&weight.value.data()[id * e..(id + 1) * e]);
            }
            LinearMap::Bilinear { w1, w2 } => {
                let (v1, v2) = (w1.value.shape()[1], w2.value.shape()[0]);
                let (e1, e2) = (w1.value.shape()[0], w2.value.shape()[1]);
                let (i1, i2) = (id / v2, id % v2);
                let w1d = w1.value.data();
                let row2 = &w2.value.data()[i2 * e2..(i2 + 1) * e2];
                for a in 0..e1 {
                    let s = w1d[a * v1 + i1];
                    for (o, &w) in out[a * e2..(a + 1) * e2].iter_mut().zip(row2) {
                        *o = s * w;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor<S>> {
        let e = self.dim();
        let mut out = vec![S::zero(); ids.len() * e];
        for (i, &id) in ids.iter().enumerate() {
            self.lookup_into(id, &mut out[i * e..(i + 1) * e])?;
        }
        Tensor::new(vec![ids.len(), e], out)
    }

    /// Accumulates the gradient of the row for `id`. Bilinear mode only
    /// touches column `id / v2` of `w1` and row `id % v2` of `w2`.
    fn accumulate_row(&mut self, id: usize, g: &[S]) {
        let e = self.dim();
        match &mut self.map {
            LinearMap::Full { weight } => {
                for (w, &d) in weight.grad.data_mut()[id * e..(id + 1) * e].iter_mut().zip(g) {
                    *w += d;
                }
            }
            LinearMap::Bilinear { w1, w2 } => {
                let (v1, v2) = (w1.value.shape()[1], w2.value.shape()[0]);
                let (e1, e2) = (w1.value.shape()[0], w2.value.shape()[1]);
                let (i1, i2) = (id / v2, id % v2);
                let w1v = w1.value.data();
                let row2: Vec<S> = w2.value.data()[i2 * e2..(i2 + 1) * e2].to_vec();
                let g1 = w1.grad.data_mut();
                for a in 0..e1 {
                    let ga = &g[a * e2..(a + 1) * e2];
                    g1[a * v1 + i1] += ga.iter().zip(&row2).map(|(&x, &y)| x * y).sum();
                }
                let g2 = &mut w2.grad.data_mut()[i2 * e2..(i2 + 1) * e2];
                for a in 0..e1 {
                    let s = w1v[a * v1 + i1];
                    for (gb, &x) in g2.iter_mut().zip(&g[a * e2..(a + 1) * e2]) {
                        *gb += s * x;
                    }
                }
            }
        }
    }

    fn ids_of(&self, x: &Tensor<S>) -> Result<Vec<usize>> {
        x.data()
            .iter()
            .map(|&v| {
                let f = v.as_f64();
                if f < 0.0 || f.fract() != 0.0 || f >= self.vocab as f64 {
                    Err(Error::Index {
                        what: "token id",
                        index: if f < 0.0 || !f.is_finite() { usize::MAX } else { f as usize },
                        bound: self.vocab,
                    })
                } else {
                    Ok(f as usize)
                }
            })
            .collect()
    }
}

impl<S: Scalar> Module<S> for Embedding<S> {
    fn kind(&self) -> &'static str {
        "embedding"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() > 1 {
            return Err(Error::shape(format!(
                "embedding expects a token sequence [L], got {input:?}"
            )));
        }
        let mut out = input.to_vec();
        out.push(self.dim());
        Ok(out)
    }

    fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.rank() == 0 || x.rank() > 2 {
            return Err(Error::shape(format!(
                "embedding expects ids shaped [N] or [N, L], got {:?}",
                x.shape()
            )));
        }
        let ids = self.ids_of(x)?;
        let out = self.lookup(&ids)?;
        let mut shape = x.shape().to_vec();
        shape.push(self.dim());
        self.cache = Some((ids, x.shape().to_vec()));
        out.into_reshape(&shape)
    }

    fn backward(&mut self, upstream: &Tensor<S>) -> Result<Tensor<S>> {
        let (ids, shape) = self.cache.take().ok_or_else(|| missing_cache("embedding"))?;
        let e = self.dim();
        if upstream.len() != ids.len() * e {
            return Err(Error::shape(format!(
                "embedding upstream {:?} does not match {} tokens x {e}",
                upstream.shape(),
                ids.len()
            )));
        }
        for (i, &id) in ids.iter().enumerate() {
            self.accumulate_row(id, &upstream.data()[i * e..(i + 1) * e]);
        }
        // token ids are not differentiable
        Ok(Tensor::zeros(&shape))
    }

    fn params(&self) -> Vec<&Param<S>> {
        self.map.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.map.params_mut()
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn flops(&self, input: &[usize]) -> Result<usize> {
        Module::<S>::output_shape(self, input)?;
        let tokens: usize = input.iter().product();
        Ok(match self.map.mode() {
            ProjectionMode::Full => 0,
            ProjectionMode::Bilinear => tokens * self.dim(),
        })
    }

    fn mode(&self) -> Option<ProjectionMode> {
        Some(self.map.mode())
    }

    fn alpha(&self) -> usize {
        self.alpha
    }
}
