//! Datasets: synthetic generators, IDX and CIFAR-10 binary codecs,
//! preprocessing and batching.

mod cifar;
mod idx;
mod source;
mod synth;
mod transform;

pub use cifar::{load_cifar10_binary, read_cifar_file, write_cifar_file, CIFAR_RECORD};
pub use idx::{load_idx, load_idx_dataset, read_idx, write_idx, IdxArray, IdxData};
pub use source::{DataSource, LoadedData};
pub use synth::{synth_blobs, synth_copy_sequences};
pub use transform::{augment_batch, channel_stats, normalize, ChannelStats};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Rng, Tensor};

/// Per-sample supervision.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Integer class labels in `0..classes`.
    Classes { labels: Vec<usize>, classes: usize },
    /// Regression targets, `[N, ...]`.
    Values(Tensor<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(t) => t.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        match self {
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                classes: *classes,
            },
            Targets::Values(t) => Targets::Values(t.select_rows(rows)),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Values(_) => None,
        }
    }

    /// Dense target tensor: one-hot rows for class labels.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        match self {
            Targets::Classes { labels, classes } => {
                let mut t = Tensor::zeros(&[labels.len(), *classes]);
                for (i, &l) in labels.iter().enumerate() {
                    t.data_mut()[i * classes + l] = S::one();
                }
                t
            }
            Targets::Values(t) => t.cast(),
        }
    }
}

/// Features `[N, ...]` with matching targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor<f64>,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(features: Tensor<f64>, targets: Targets) -> Result<Self> {
        let n = features.shape().first().copied().unwrap_or(0);
        if n != targets.len() {
            return Err(Error::Data(format!(
                "{n} samples but {} targets",
                targets.len()
            )));
        }
        if let Targets::Classes { labels, classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
            }
        }
        Ok(Self { features, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample feature shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Classes { classes, .. } => Some(classes),
            Targets::Values(_) => None,
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(rows),
            targets: self.targets.select(rows),
        }
    }

    /// Stacks datasets with identical sample shapes and target kinds.
    pub fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
        let Some(first) = parts.first() else {
            return Err(Error::Data("nothing to concatenate".into()));
        };
        let sample = first.sample_shape().to_vec();
        let n: usize = parts.iter().map(Dataset::len).sum();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut values = Vec::new();
        let mut value_shape = None;
        let mut classes = 0;
        for p in parts {
            if p.sample_shape() != sample {
                return Err(Error::Data(format!(
                    "cannot stack samples {:?} with {sample:?}",
                    p.sample_shape()
                )));
            }
            features.extend(p.features.into_data());
            match p.targets {
                Targets::Classes { labels: l, classes: c } if value_shape.is_none() => {
                    labels.extend(l);
                    classes = classes.max(c);
                }
                Targets::Values(v) if labels.is_empty() && classes == 0 => {
                    value_shape = Some(v.shape()[1..].to_vec());
                    values.extend(v.into_data());
                }
                _ => return Err(Error::Data("cannot stack mixed target kinds".into())),
            }
        }
        let targets = match value_shape {
            None => Targets::Classes { labels, classes },
            Some(rest) => {
                let mut shape = vec![n];
                shape.extend(rest);
                Targets::Values(Tensor::new(shape, values)?)
            }
        };
        let mut shape = vec![n];
        shape.extend(sample);
        Dataset::new(Tensor::new(shape, features)?, targets)
    }

    /// Seeded permutation, then the last `fraction` of samples (rounded
    /// down) becomes the validation part.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        Rng::seed(seed).shuffle(&mut order);
        let n_val = ((n as f64) * fraction).floor() as usize;
        let (train, val) = order.split_at(n - n_val);
        (self.subset(train), self.subset(val))
    }
}

/// Index batches for one epoch: every sample exactly once, the last batch
/// possibly short. Shuffled when an rng is given.
pub fn batches(n: usize, size: usize, rng: Option<&mut Rng>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        rng.shuffle(&mut order);
    }
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}
