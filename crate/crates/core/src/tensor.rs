//! Dense row-major tensors and the seeded generator used for initialization.
//!
//! A [`Tensor`] is a shape plus a flat data buffer. Element `(i1, .., in)` lives
//! at offset `i1*(s2*..*sn) + .. + in`. Reshaping only reinterprets the shape.
//!
//! Matrix products sum over the inner dimension left to right, so results are
//! bit-reproducible and agree exactly with a naive triple loop.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} elements but data has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    /// Builds a tensor from `f64` values, converting to `S`.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| S::of(v)).collect())
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flatten().map(|&v| S::of(v)).collect();
        Self::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Converts the element type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &s)| {
                assert!(i < s, "index {i} out of bounds for extent {s}");
                acc * s + i
            })
    }

    /// Element at a multi-index. Panics when out of bounds.
    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: S) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) into {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                numel(shape)
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_assign: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: S) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn sum_squares(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element-wise difference; errors when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "compare: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Row `i` of the leading axis as a slice.
    pub fn row(&self, i: usize) -> &[S] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Gathers rows of the leading axis into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let stride = self.data.len().checked_div(self.shape[0]).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self { shape, data }
    }
}

/// Reinterprets a length-`d1*d2` vector as a `d1 x d2` row-major matrix.
pub fn reshape_matrix<S: Scalar>(v: &Tensor<S>, d1: usize, d2: usize) -> Result<Tensor<S>> {
    if v.rank() != 1 {
        return Err(Error::shape(format!(
            "reshape_matrix expects a vector, got shape {:?}",
            v.shape()
        )));
    }
    if d1 * d2 != v.len() {
        return Err(Error::shape(format!(
            "reshape_matrix: {d1} x {d2} = {} does not match vector length {}",
            d1 * d2,
            v.len()
        )));
    }
    v.reshape(&[d1, d2])
}

/// Row-major flattening of a matrix; the inverse of [`reshape_matrix`].
pub fn flatten<S: Scalar>(m: &Tensor<S>) -> Result<Tensor<S>> {
    let (r, c) = m.dims2()?;
    m.reshape(&[r * c])
}

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul: inner extents differ, {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![S::zero(); m * n];
    kernels::gemm(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub fn hadamard<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.zip_with(b, "hadamard", |x, y| x * y)
}

/// Kronecker product: block `(i, j)` of the result is `a[i, j] * b`.
pub fn kronecker<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (p, q) = a.dims2()?;
    let (r, s) = b.dims2()?;
    let cols = q * s;
    let mut out = vec![S::zero(); p * r * cols];
    for i in 0..p {
        for j in 0..q {
            let aij = a.data()[i * q + j];
            for k in 0..r {
                let row = (i * r + k) * cols + j * s;
                for l in 0..s {
                    out[row + l] = aij * b.data()[k * s + l];
                }
            }
        }
    }
    Tensor::new(vec![p * r, cols], out)
}

/// Samples i.i.d. `N(0, stddev^2)` entries.
pub fn normal_init<S: Scalar>(rng: &mut Rng, shape: &[usize], stddev: f64) -> Result<Tensor<S>> {
    if !(stddev > 0.0 && stddev.is_finite()) {
        return Err(Error::Param(format!(
            "normal_init: stddev must be positive, got {stddev}"
        )));
    }
    let data = (0..numel(shape))
        .map(|_| S::of(rng.normal() * stddev))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Default initialization standard deviation (variance 0.01).
pub const DEFAULT_INIT_STD: f64 = 0.1;

/// Seeded pseudo-random generator.
///
/// The stream is ChaCha8 keyed through `SeedableRng::seed_from_u64`; normal
/// samples come from `rand_distr::StandardNormal`. Changing either breaks every
/// seed-pinned golden value in the test suite.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// A child generator whose stream is determined by this one's state.
    pub fn fork(&mut self) -> Self {
        Self::seed(self.next_u64())
    }
}

/// Slice-level matrix kernels on row-major buffers.
///
/// Every kernel accumulates into `c` and sums the shared dimension in
/// increasing index order.
pub mod kernels {
    use crate::scalar::Scalar;

    /// `c[m,n] += a[m,k] * b[k,n]`
    pub fn gemm<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (cj, &bj) in crow.iter_mut().zip(brow) {
                    *cj += aip * bj;
                }
            }
        }
    }

    /// `c[m,n] += a[k,m]^T * b[k,n]`
    pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), k * m);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let api = a[p * m + i];
                let crow = &mut c[i * n..(i + 1) * n];
                for (cj, &bj) in crow.iter_mut().zip(brow) {
                    *cj += api * bj;
                }
            }
        }
    }

    /// `c[m,n] += a[m,k] * b[n,k]^T`
    pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        debug_assert_eq!(c.len(), m * n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                c[i * n + j] += acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::tensor::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                out.set(&[i, j], s);
            }
        }
        out
    }

    #[test]
    fn reshape_matrix_is_row_major() {
        let v = t(&[6], &[1., 2., 3., 4., 5., 6.]);
        let m = reshape_matrix(&v, 2, 3).unwrap();
        assert_eq!(m, t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        assert_eq!(m.at(&[1, 0]), 4.0);
        assert_eq!(flatten(&m).unwrap(), v);

        let one = reshape_matrix(&t(&[1], &[7.]), 1, 1).unwrap();
        assert_eq!(one, t(&[1, 1], &[7.]));
    }

    #[test]
    fn reshape_matrix_mismatch_names_both_sides() {
        let v = t(&[6], &[0.; 6]);
        let err = reshape_matrix(&v, 4, 2).unwrap_err().to_string();
        assert!(err.contains("4 x 2 = 8") && err.contains("6"), "{err}");
    }

    #[test]
    fn flatten_examples() {
        assert_eq!(
            flatten(&t(&[2, 2], &[1., 2., 3., 4.])).unwrap(),
            t(&[4], &[1., 2., 3., 4.])
        );
        assert_eq!(flatten(&t(&[1, 1], &[0.])).unwrap(), t(&[1], &[0.]));
        assert!(matches!(flatten(&t(&[4], &[0.; 4])), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        assert_eq!(
            matmul(&a, &t(&[2, 1], &[0., 1.])).unwrap(),
            t(&[2, 1], &[2., 4.])
        );
        assert!(matmul(&a, &t(&[3, 1], &[0.; 3])).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = Rng::seed(11);
        let a: Tensor = normal_init(&mut rng, &[3, 4], 1.0).unwrap();
        let b: Tensor = normal_init(&mut rng, &[4, 2], 1.0).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let mut rng = Rng::seed(5);
        let a: Tensor = normal_init(&mut rng, &[4, 3], 1.0).unwrap();
        let b: Tensor = normal_init(&mut rng, &[4, 5], 1.0).unwrap();
        let mut c = vec![0.0; 15];
        kernels::gemm_tn(a.data(), b.data(), &mut c, 3, 4, 5);
        let want = matmul(&a.transpose().unwrap(), &b).unwrap();
        assert!(Tensor::new(vec![3, 5], c).unwrap().max_abs_diff(&want).unwrap() < 1e-14);

        let d: Tensor = normal_init(&mut rng, &[5, 3], 1.0).unwrap();
        let mut c = vec![0.0; 20];
        kernels::gemm_nt(a.data(), d.data(), &mut c, 4, 3, 5);
        let want = matmul(&a, &d.transpose().unwrap()).unwrap();
        assert!(Tensor::new(vec![4, 5], c).unwrap().max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn hadamard_examples() {
        let a = t(&[3], &[1., 2., 3.]);
        assert_eq!(
            hadamard(&a, &t(&[3], &[0., 1., 2.])).unwrap(),
            t(&[3], &[0., 2., 6.])
        );
        assert_eq!(hadamard(&a, &Tensor::ones(&[3])).unwrap(), a);
        assert_eq!(hadamard(&a, &Tensor::zeros(&[3])).unwrap(), Tensor::zeros(&[3]));
        assert!(hadamard(&a, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn kronecker_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 2], &[0., 1., 1., 0.]);
        let want = t(
            &[4, 4],
            &[
                0., 1., 0., 2., //
                1., 0., 2., 0., //
                0., 3., 0., 4., //
                3., 0., 4., 0.,
            ],
        );
        assert_eq!(kronecker(&a, &b).unwrap(), want);
        let one = t(&[1, 1], &[1.]);
        assert_eq!(kronecker(&one, &b).unwrap(), b);
        assert_eq!(kronecker(&a, &one).unwrap(), a);
        assert!(kronecker(&t(&[2], &[1., 2.]), &b).is_err());
    }

    #[test]
    fn normal_init_is_seed_deterministic() {
        let a: Tensor = normal_init(&mut Rng::seed(42), &[2, 2], 0.1).unwrap();
        let b: Tensor = normal_init(&mut Rng::seed(42), &[2, 2], 0.1).unwrap();
        assert_eq!(a, b);
        let single: Tensor = normal_init(&mut Rng::seed(1), &[1], 0.1).unwrap();
        assert!(single.data()[0].is_finite());
        assert!(matches!(
            normal_init::<f64>(&mut Rng::seed(1), &[1], 0.0),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn normal_init_moments() {
        let x: Tensor = normal_init(&mut Rng::seed(2024), &[1_000_000], 0.1).unwrap();
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert!((var.sqrt() - 0.1).abs() < 2e-3, "std {}", var.sqrt());
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn reshape_flatten_identity(d1 in 1usize..6, d2 in 1usize..6, seed in any::<u64>()) {
            let v: Tensor = normal_init(&mut Rng::seed(seed), &[d1 * d2], 1.0).unwrap();
            let m = reshape_matrix(&v, d1, d2).unwrap();
            prop_assert_eq!(&flatten(&m).unwrap(), &v);
            prop_assert_eq!(reshape_matrix(&flatten(&m).unwrap(), d1, d2).unwrap(), m);
        }

        #[test]
        fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 3)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-12);
        }

        #[test]
        fn kronecker_mixed_product(a in small_matrix(2, 3), b in small_matrix(2, 2),
                                   c in small_matrix(3, 2), d in small_matrix(2, 3)) {
            let left = matmul(&kronecker(&a, &b).unwrap(), &kronecker(&c, &d).unwrap()).unwrap();
            let right = kronecker(&matmul(&a, &c).unwrap(), &matmul(&b, &d).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-12);
        }

        #[test]
        fn seeded_streams_are_identical(seed in any::<u64>()) {
            let a: Tensor = normal_init(&mut Rng::seed(seed), &[3, 3], 0.5).unwrap();
            let b: Tensor = normal_init(&mut Rng::seed(seed), &[3, 3], 0.5).unwrap();
            prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
