use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

use super::{Dataset, Targets};

/// Gaussian clusters: `classes` centers drawn from `N(0, 1)` per
/// coordinate, then `per_class` points each at `center + spread * N(0, 1)`.
/// Samples are grouped by class.
pub fn synth_blobs(
    rng: &mut Rng,
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
) -> Result<Dataset> {
    if classes == 0 || dim == 0 || per_class == 0 {
        return Err(Error::Data("blobs need classes, dim and n of at least 1".into()));
    }
    if spread.is_nan() || spread < 0.0 {
        return Err(Error::Data("blob spread must be non-negative".into()));
    }
    let centers: Vec<f64> = (0..classes * dim).map(|_| rng.normal()).collect();
    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let center = &centers[c * dim..(c + 1) * dim];
        for _ in 0..per_class {
            features.extend(center.iter().map(|&m| m + spread * rng.normal()));
            labels.push(c);
        }
    }
    Dataset::new(
        Tensor::new(vec![classes * per_class, dim], features)?,
        Targets::Classes { labels, classes },
    )
}

/// Uniform token sequences `[n, len]` whose target is the first token.
pub fn synth_copy_sequences(rng: &mut Rng, vocab: usize, len: usize, n: usize) -> Result<Dataset> {
    if vocab < 2 || len == 0 || n == 0 {
        return Err(Error::Data("sequences need vocab >= 2, len >= 1, n >= 1".into()));
    }
    let tokens: Vec<usize> = (0..n * len).map(|_| rng.below(vocab)).collect();
    let labels = tokens.chunks(len).map(|s| s[0]).collect();
    Dataset::new(
        Tensor::new(vec![n, len], tokens.iter().map(|&t| t as f64).collect())?,
        Targets::Classes { labels, classes: vocab },
    )
}
