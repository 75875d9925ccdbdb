//! CIFAR-10 binary batches: records of one label byte followed by 3072
//! channel-planar pixel bytes (R plane, G plane, B plane, each 32x32).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Targets};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

/// Decodes one batch file into `[N, 32, 32, 3]` features scaled to `[0, 1]`.
pub fn read_cifar_file(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Parse(format!(
            "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3 * PLANE);
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] >= 10 {
            return Err(Error::Parse(format!("label byte {} outside 0..10", rec[0])));
        }
        labels.push(rec[0] as usize);
        let planes = &rec[1..];
        for p in 0..PLANE {
            for c in 0..3 {
                pixels.push(f64::from(planes[c * PLANE + p]) / 255.0);
            }
        }
    }
    Dataset::new(
        Tensor::new(vec![n, SIDE, SIDE, 3], pixels)?,
        Targets::Classes { labels, classes: 10 },
    )
}

/// Encodes `[N, 32, 32, 3]` features in `[0, 1]` (rounded to bytes).
pub fn write_cifar_file(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    if data.sample_shape() != [SIDE, SIDE, 3] {
        return Err(Error::Data(format!(
            "cifar records hold [32, 32, 3] images, got {:?}",
            data.sample_shape()
        )));
    }
    let labels = data
        .targets
        .labels()
        .ok_or_else(|| Error::Data("cifar records need class labels".into()))?;
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (i, &label) in labels.iter().enumerate() {
        let label = u8::try_from(label)
            .ok()
            .filter(|&l| l < 10)
            .ok_or_else(|| Error::Data(format!("label {label} outside 0..10")))?;
        out.push(label);
        let row = data.features.row(i);
        for c in 0..3 {
            for p in 0..PLANE {
                out.push((row[p * 3 + c].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads `data_batch_1.bin` .. `data_batch_5.bin` as the training set and
/// `test_batch.bin` (when present) as the test set.
pub fn load_cifar10_binary(dir: impl AsRef<Path>) -> Result<(Dataset, Option<Dataset>)> {
    let dir = dir.as_ref();
    let mut parts = Vec::new();
    for k in 1..=5 {
        let path = dir.join(format!("data_batch_{k}.bin"));
        if path.exists() {
            parts.push(read_cifar_file(&path)?);
        }
    }
    if parts.is_empty() {
        return Err(Error::Data(format!(
            "no data_batch_*.bin files in {}",
            dir.display()
        )));
    }
    let train = Dataset::concat(parts)?;
    let test_path = dir.join("test_batch.bin");
    let test = if test_path.exists() {
        Some(read_cifar_file(test_path)?)
    } else {
        None
    };
    Ok((train, test))
}
