//! `--data` specifications: `synth:blobs:k=v,...`, `synth:seq:k=v,...`,
//! `idx:DIR`, `cifar10:DIR`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Rng;

use super::{load_cifar10_binary, load_idx_dataset, synth_blobs, synth_copy_sequences, Dataset};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        seed: u64,
    },
    Sequences {
        vocab: usize,
        len: usize,
        n: usize,
        seed: u64,
    },
    Idx(PathBuf),
    Cifar10(PathBuf),
}

/// A training set and, when the source provides one, a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

fn options(text: &str) -> Result<BTreeMap<&str, &str>> {
    text.split(',')
        .filter(|s| !s.is_empty())
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| Error::Data(format!("expected key=value, got `{kv}`")))
        })
        .collect()
}

fn take<T: FromStr>(opts: &mut BTreeMap<&str, &str>, key: &str, default: T) -> Result<T> {
    match opts.remove(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Data(format!("bad value `{v}` for `{key}`"))),
    }
}

fn finish(opts: BTreeMap<&str, &str>) -> Result<()> {
    match opts.keys().next() {
        None => Ok(()),
        Some(k) => Err(Error::Data(format!("unknown data option `{k}`"))),
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(spec: &str) -> Result<Self> {
        if let Some(dir) = spec.strip_prefix("idx:") {
            return Ok(DataSource::Idx(dir.into()));
        }
        if let Some(dir) = spec.strip_prefix("cifar10:") {
            return Ok(DataSource::Cifar10(dir.into()));
        }
        let (kind, rest) = match spec.strip_prefix("synth:") {
            Some(r) => r.split_once(':').unwrap_or((r, "")),
            None => return Err(Error::Data(format!("unrecognized data spec `{spec}`"))),
        };
        let mut o = options(rest)?;
        let source = match kind {
            "blobs" => DataSource::Blobs {
                classes: take(&mut o, "classes", 4)?,
                dim: take(&mut o, "dim", 64)?,
                per_class: take(&mut o, "n", 250)?,
                spread: take(&mut o, "spread", 1.0)?,
                seed: take(&mut o, "seed", 0)?,
            },
            "seq" => DataSource::Sequences {
                vocab: take(&mut o, "vocab", 8)?,
                len: take(&mut o, "len", 5)?,
                n: take(&mut o, "n", 2000)?,
                seed: take(&mut o, "seed", 0)?,
            },
            other => return Err(Error::Data(format!("unknown synthetic kind `{other}`"))),
        };
        finish(o)?;
        Ok(source)
    }
}

impl DataSource {
    pub fn load(&self) -> Result<LoadedData> {
        match self {
            DataSource::Blobs { classes, dim, per_class, spread, seed } => Ok(LoadedData {
                train: synth_blobs(&mut Rng::seed(*seed), *classes, *dim, *per_class, *spread)?,
                test: None,
            }),
            DataSource::Sequences { vocab, len, n, seed } => Ok(LoadedData {
                train: synth_copy_sequences(&mut Rng::seed(*seed), *vocab, *len, *n)?,
                test: None,
            }),
            DataSource::Idx(dir) => {
                let pair = |names: [(&str, &str); 2]| {
                    names
                        .into_iter()
                        .map(|(x, y)| (dir.join(x), dir.join(y)))
                        .find(|(x, y)| x.exists() && y.exists())
                };
                let train = pair([
                    ("train-images.idx", "train-labels.idx"),
                    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                ])
                .ok_or_else(|| {
                    Error::Data(format!("no training idx files in {}", dir.display()))
                })?;
                let test = pair([
                    ("test-images.idx", "test-labels.idx"),
                    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
                ]);
                Ok(LoadedData {
                    train: load_idx_dataset(&train.0, &train.1)?,
                    test: test.map(|(x, y)| load_idx_dataset(x, y)).transpose()?,
                })
            }
            DataSource::Cifar10(dir) => {
                let (train, test) = load_cifar10_binary(dir)?;
                Ok(LoadedData { train, test })
            }
        }
    }
}
