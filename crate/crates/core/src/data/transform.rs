use crate::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

use super::Dataset;

/// Per-channel statistics over the last feature axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Mean and (population) standard deviation of every channel. A channel
/// with zero deviation gets a deviation of 1 so it normalizes to zeros.
pub fn channel_stats(data: &Dataset) -> Result<ChannelStats> {
    let c = *data
        .sample_shape()
        .last()
        .ok_or_else(|| Error::Data("features need at least one per-sample axis".into()))?;
    let x = data.features.data();
    if x.is_empty() {
        return Err(Error::Data("cannot compute statistics of an empty dataset".into()));
    }
    let count = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for row in x.chunks(c) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for row in x.chunks(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .iter()
        .enumerate()
        .map(|(ch, &s)| {
            let sd = (s / count).sqrt();
            // rounding in the mean leaves ~1e-16 residue on constant channels
            if sd > 1e-12 * mean[ch].abs().max(1.0) {
                sd
            } else {
                log::warn!("channel {ch} has zero deviation; using 1");
                1.0
            }
        })
        .collect();
    Ok(ChannelStats { mean, std })
}

/// `(x - mean) / std` per channel.
pub fn normalize(data: &Dataset, stats: &ChannelStats) -> Result<Dataset> {
    let c = stats.mean.len();
    if data.sample_shape().last() != Some(&c) {
        return Err(Error::Data(format!(
            "statistics for {c} channels do not fit samples of shape {:?}",
            data.sample_shape()
        )));
    }
    let mut out = data.clone();
    for row in out.features.data_mut().chunks_mut(c) {
        for ((v, &m), &s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

/// Random flips, padded crops, quarter-turn rotations and channel
/// permutations of an image batch `[N, H, W, C]`, drawn from `rng`.
pub fn augment_batch(x: &Tensor<f64>, rng: &mut Rng, flags: &AugmentConfig) -> Result<Tensor<f64>> {
    let [n, h, w, c] = x.shape()[..] else {
        return Err(Error::shape(format!(
            "augmentation expects [N, H, W, C], got {:?}",
            x.shape()
        )));
    };
    let mut out = x.clone();
    let size = h * w * c;
    for s in 0..n {
        let img = &mut out.data_mut()[s * size..(s + 1) * size];
        if flags.flip && rng.coin() {
            flip_horizontal(img, h, w, c);
        }
        if flags.crop_pad > 0 {
            let p = flags.crop_pad;
            let dy = rng.below(2 * p + 1) as isize - p as isize;
            let dx = rng.below(2 * p + 1) as isize - p as isize;
            shift(img, h, w, c, dy, dx);
        }
        if flags.rotate && h == w {
            for _ in 0..rng.below(4) {
                rotate_quarter(img, h, c);
            }
        }
        if flags.channel_swap {
            let mut perm: Vec<usize> = (0..c).collect();
            rng.shuffle(&mut perm);
            for px in img.chunks_mut(c) {
                let orig = px.to_vec();
                for (dst, &src) in px.iter_mut().zip(&perm) {
                    *dst = orig[src];
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn flip_horizontal(img: &mut [f64], h: usize, w: usize, c: usize) {
    for i in 0..h {
        for j in 0..w / 2 {
            for ch in 0..c {
                img.swap((i * w + j) * c + ch, (i * w + w - 1 - j) * c + ch);
            }
        }
    }
}

/// Equivalent to zero-padding then cropping at offset `(dy, dx)`.
fn shift(img: &mut [f64], h: usize, w: usize, c: usize, dy: isize, dx: isize) {
    let src = img.to_vec();
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = (i as isize + dy, j as isize + dx);
            let inside = (0..h as isize).contains(&si) && (0..w as isize).contains(&sj);
            for ch in 0..c {
                img[(i * w + j) * c + ch] = if inside {
                    src[(si as usize * w + sj as usize) * c + ch]
                } else {
                    0.0
                };
            }
        }
    }
}

fn rotate_quarter(img: &mut [f64], side: usize, c: usize) {
    let src = img.to_vec();
    for i in 0..side {
        for j in 0..side {
            for ch in 0..c {
                img[(j * side + side - 1 - i) * c + ch] = src[(i * side + j) * c + ch];
            }
        }
    }
}
