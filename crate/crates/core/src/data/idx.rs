//! IDX: `00 00 <dtype> <rank>`, `rank` big-endian u32 extents, then
//! big-endian elements.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Targets};

const U8: u8 = 0x08;
const F32: u8 = 0x0D;
const F64: u8 = 0x0E;

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl IdxData {
    fn dtype(&self) -> u8 {
        match self {
            IdxData::U8(_) => U8,
            IdxData::F32(_) => F32,
            IdxData::F64(_) => F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            IdxData::U8(v) => v.len(),
            IdxData::F32(v) => v.len(),
            IdxData::F64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub shape: Vec<usize>,
    pub data: IdxData,
}

impl IdxArray {
    pub fn new(shape: Vec<usize>, data: IdxData) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.len() > 255 {
            return Err(Error::shape(format!(
                "idx shape {shape:?} does not hold {} elements",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Values as `f64`; unsigned bytes are scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor<f64>> {
        let data = match &self.data {
            IdxData::U8(v) => v.iter().map(|&b| f64::from(b) / 255.0).collect(),
            IdxData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            IdxData::F64(v) => v.clone(),
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let take = |offset: usize, len: usize| -> Result<&[u8]> {
            let end = offset.saturating_add(len);
            bytes.get(offset..end).ok_or_else(|| Error::Truncated {
                offset: bytes.len(),
                needed: end - bytes.len(),
            })
        };
        let magic = take(0, 4)?;
        if magic[0] != 0 || magic[1] != 0 {
            return Err(Error::BadMagic {
                expected: vec![0, 0],
                found: magic[..2].to_vec(),
            });
        }
        let (dtype, rank) = (magic[2], magic[3] as usize);
        let width = match dtype {
            U8 => 1,
            F32 => 4,
            F64 => 8,
            other => return Err(Error::Dtype(other)),
        };
        let dims = take(4, 4 * rank)?;
        let shape: Vec<usize> = dims
            .chunks(4)
            .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(width).map(|_| c))
            .ok_or_else(|| Error::Parse(format!("idx extents {shape:?} overflow")))?;
        let body = take(4 + 4 * rank, count * width)?;
        let data = match dtype {
            U8 => IdxData::U8(body.to_vec()),
            F32 => IdxData::F32(
                body.chunks(4)
                    .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            _ => IdxData::F64(
                body.chunks(8)
                    .map(|c| f64::from_be_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
        };
        let extra = bytes.len() - (4 + 4 * rank + count * width);
        if extra != 0 {
            return Err(Error::Parse(format!("{extra} trailing bytes after idx payload")));
        }
        Ok(Self { shape, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![0, 0, self.data.dtype(), self.shape.len() as u8];
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        match &self.data {
            IdxData::U8(v) => out.extend_from_slice(v),
            IdxData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
            IdxData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
        }
        out
    }
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    IdxArray::parse(&std::fs::read(path)?)
}

pub fn write_idx(path: impl AsRef<Path>, array: &IdxArray) -> Result<()> {
    std::fs::write(path, array.encode())?;
    Ok(())
}

/// Reads an IDX file as a tensor with its stored shape (bytes scaled to
/// `[0, 1]`, floats unchanged).
pub fn load_idx(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    read_idx(path)?.to_tensor()
}

/// Pairs an image/feature file with a label file. Byte images of shape
/// `[N, H, W]` gain a trailing channel axis of 1.
pub fn load_idx_dataset(features: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let raw = read_idx(features)?;
    let mut x = raw.to_tensor()?;
    if matches!(raw.data, IdxData::U8(_)) && raw.shape.len() == 3 {
        let mut shape = raw.shape.clone();
        shape.push(1);
        x = x.into_reshape(&shape)?;
    }
    let labels = read_idx(labels)?;
    if labels.shape.len() != 1 {
        return Err(Error::Data(format!(
            "label file must be rank 1, got shape {:?}",
            labels.shape
        )));
    }
    let labels: Vec<usize> = match labels.data {
        IdxData::U8(v) => v.into_iter().map(usize::from).collect(),
        _ => return Err(Error::Data("label file must hold unsigned bytes".into())),
    };
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    if x.shape().first() != Some(&labels.len()) {
        return Err(Error::Data(format!(
            "{} labels for features of shape {:?}",
            labels.len(),
            x.shape()
        )));
    }
    Dataset::new(x, Targets::Classes { labels, classes })
}
