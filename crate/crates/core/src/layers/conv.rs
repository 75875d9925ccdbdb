//! 2-D convolution as patch extraction followed by a per-patch projection.
//!
//! Inputs are `[N, H, W, C]`. Each receptive field is a `(kh*kw) x C` matrix
//! (spatial rows, channel columns), so a bilinear convolution uses
//! `w1: [alpha*k1, kh*kw]` over space and `w2: [C, alpha*k2]` over channels,
//! producing `alpha^2 * k1 * k2` output channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Param;
use crate::projections::{factorize_dim, Activation};
use crate::scalar::Scalar;
use crate::tensor::{Rng, Tensor};

use super::{activate, batch_of, missing_cache, relu_signature, LinearMap, Module, ProjectionMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Valid,
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    /// `(height, width)`
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(kernel: (usize, usize), stride: usize, padding: Padding) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    /// `(out_h, out_w, pad_top, pad_left)` for an `h x w` input.
    pub fn geometry(&self, h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
        let (oh, pt) = conv_output_extent(h, self.kernel.0, self.stride, self.padding)?;
        let (ow, pl) = conv_output_extent(w, self.kernel.1, self.stride, self.padding)?;
        Ok((oh, ow, pt, pl))
    }
}

/// Output extent and leading padding along one axis. `same` pads so that
/// the output is `ceil(input / stride)` with the extra row, if any, at the end.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Param("kernel and stride must be positive".into()));
    }
    match padding {
        Padding::Valid => {
            if kernel > input {
                return Err(Error::shape(format!(
                    "kernel extent {kernel} exceeds input extent {input}"
                )));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

/// Extracts every receptive field of `x: [N, H, W, C]` as a
/// `[kh*kw, C]` matrix, giving `[N*P, kh*kw, C]` with patches in
/// `(n, row, col)` order. Padding reads as zero.
pub fn im2col<S: Scalar>(x: &Tensor<S>, spec: &ConvSpec) -> Result<Tensor<S>> {
    let [n, h, w, c] = x.shape()[..] else {
        return Err(Error::shape(format!("im2col expects [N, H, W, C], got {:?}", x.shape())));
    };
    let (oh, ow, pt, pl) = spec.geometry(h, w)?;
    let (kh, kw) = spec.kernel;
    let plen = kh * kw * c;
    let mut out = vec![S::zero(); n * oh * ow * plen];
    let src = x.data();
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ((b * oh + oy) * ow + ox) * plen;
                for ky in 0..kh {
                    let iy = (oy * spec.stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * spec.stride + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s = ((b * h + iy as usize) * w + ix as usize) * c;
                        let d = base + (ky * kw + kx) * c;
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n * oh * ow, kh * kw, c], out)
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input
/// grid, summing where patches overlap.
pub fn col2im<S: Scalar>(cols: &Tensor<S>, input_shape: &[usize], spec: &ConvSpec) -> Result<Tensor<S>> {
    let [n, h, w, c] = input_shape[..] else {
        return Err(Error::shape(format!("col2im expects [N, H, W, C], got {input_shape:?}")));
    };
    let (oh, ow, pt, pl) = spec.geometry(h, w)?;
    let (kh, kw) = spec.kernel;
    if cols.shape() != [n * oh * ow, kh * kw, c] {
        return Err(Error::shape(format!(
            "col2im: columns {:?} do not match [{}, {}, {c}]",
            cols.shape(),
            n * oh * ow,
            kh * kw
        )));
    }
    let plen = kh * kw * c;
    let mut out = vec![S::zero(); n * h * w * c];
    let src = cols.data();
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ((b * oh + oy) * ow + ox) * plen;
                for ky in 0..kh {
                    let iy = (oy * spec.stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * spec.stride + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let d = ((b * h + iy as usize) * w + ix as usize) * c;
                        let s = base + (ky * kw + kx) * c;
                        for ch in 0..c {
                            out[d + ch] += src[s + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

#[derive(Clone, Debug)]
struct ConvCache<S> {
    input_shape: Vec<usize>,
    cols: Tensor<S>,
    pre: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct Conv2d<S = f64> {
    in_channels: usize,
    base_out: usize,
    alpha: usize,
    spec: ConvSpec,
    activation: Activation,
    map: LinearMap<S>,
    bias: Param<S>,
    cache: Option<ConvCache<S>>,
}

impl<S: Scalar> Conv2d<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut Rng,
        mode: ProjectionMode,
        in_channels: usize,
        out_channels: usize,
        spec: ConvSpec,
        alpha: usize,
        activation: Activation,
        init_std: f64,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || spec.patch_len() == 0 || spec.stride == 0 {
            return Err(Error::Param("conv2d extents must be positive".into()));
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
                let map = LinearMap::full(rng, spec.patch_len() * in_channels, out_channels, init_std)?;
                (map, vec![out_channels])
            }
            ProjectionMode::Bilinear => {
                let (k1, k2) = factorize_dim(out_channels);
                let map = LinearMap::bilinear(
                    rng,
                    (spec.patch_len(), in_channels),
                    (alpha * k1, alpha * k2),
                    init_std,
                )?;
                (map, vec![alpha * k1, alpha * k2])
            }
        };
        Ok(Self {
            in_channels,
            base_out: out_channels,
            alpha,
            spec,
            activation,
            map,
            bias: Param::bias("bias", Tensor::zeros(&bias_shape)),
            cache: None,
        })
    }

    /// Builds a layer around an existing map. A full map must be
    /// `[kh*kw*C, C']`; a bilinear one must take `(kh*kw, C)` inputs.
    pub fn from_parts(
        map: LinearMap<S>,
        bias: Tensor<S>,
        spec: ConvSpec,
        in_channels: usize,
        activation: Activation,
        alpha: usize,
    ) -> Result<Self> {
        let ok_in = match map.mode() {
            ProjectionMode::Full => map.in_dim() == spec.patch_len() * in_channels,
            ProjectionMode::Bilinear => map.input_factors() == (spec.patch_len(), in_channels),
        };
        if !ok_in || bias.len() != map.out_dim() {
            return Err(Error::shape("conv2d map does not match kernel, channels or bias"));
        }
        Ok(Self {
            in_channels,
            base_out: map.out_dim() / (alpha * alpha),
            alpha,
            spec,
            activation,
            bias: Param::bias("bias", bias),
            map,
            cache: None,
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Effective output channels (`alpha^2 * k1 * k2` in bilinear mode).
    pub fn out_channels(&self) -> usize {
        self.map.out_dim()
    }

    pub fn base_out(&self) -> usize {
        self.base_out
    }

    pub fn map(&self) -> &LinearMap<S> {
        &self.map
    }

    pub fn to_full(&self) -> Result<Self> {
        Ok(Self {
            in_channels: self.in_channels,
            base_out: self.out_channels(),
            alpha: 1,
            spec: self.spec,
            activation: self.activation,
            map: self.map.to_full()?,
            bias: Param::bias("bias", self.bias.value.reshape(&[self.out_channels()])?),
            cache: None,
        })
    }
}

impl<S: Scalar> Module<S> for Conv2d<S> {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [h, w, c] = input[..] else {
            return Err(Error::shape(format!("conv2d expects [H, W, C], got {input:?}")));
        };
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv2d expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (oh, ow, _, _) = self.spec.geometry(h, w)?;
        Ok(vec![oh, ow, self.out_channels()])
    }

    fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let per_sample = x.shape().get(1..).unwrap_or(&[]).to_vec();
        let out_shape = Module::<S>::output_shape(self, &per_sample)?;
        let n = batch_of(x, &per_sample, "conv2d")?;
        let cols = im2col(x, &self.spec)?;
        let rows = cols.shape()[0];
        let k = self.out_channels();
        let mut pre = Vec::with_capacity(rows * k);
        for _ in 0..rows {
            pre.extend_from_slice(self.bias.value.data());
        }
        self.map.apply_rows(cols.data(), &mut pre, rows);
        let mut shape = vec![n];
        shape.extend(out_shape);
        let out = Tensor::new(shape, activate(self.activation, &pre))?;
        self.cache = Some(ConvCache {
            input_shape: x.shape().to_vec(),
            cols,
            pre,
        });
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor<S>) -> Result<Tensor<S>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("conv2d"))?;
        let rows = cache.cols.shape()[0];
        let k = self.out_channels();
        if upstream.len() != rows * k {
            return Err(Error::shape(format!(
                "conv2d upstream {:?} does not match {rows} positions x {k} channels",
                upstream.shape()
            )));
        }
        let phi = self.activation;
        let delta: Vec<S> = upstream
            .data()
            .iter()
            .zip(&cache.pre)
            .map(|(&u, &z)| u * phi.derivative(z))
            .collect();
        let bias_grad = self.bias.grad.data_mut();
        for row in delta.chunks(k) {
            for (g, &d) in bias_grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dcols = vec![S::zero(); cache.cols.len()];
        self.map.backward_rows(cache.cols.data(), &delta, Some(&mut dcols), rows);
        let dcols = Tensor::new(cache.cols.shape().to_vec(), dcols)?;
        col2im(&dcols, &cache.input_shape, &self.spec)
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
        let out = Module::<S>::output_shape(self, input)?;
        let positions = out[0] * out[1];
        let act = if self.activation == Activation::Identity {
            0
        } else {
            self.out_channels()
        };
        Ok(positions * (self.map.flops_per_row() + act))
    }

    fn mode(&self) -> Option<ProjectionMode> {
        Some(self.map.mode())
    }

    fn alpha(&self) -> usize {
        self.alpha
    }

    fn kinks(&self, out: &mut Vec<u64>) {
        if let (Activation::Relu, Some(c)) = (self.activation, &self.cache) {
            relu_signature(&c.pre, out);
        }
    }
}
