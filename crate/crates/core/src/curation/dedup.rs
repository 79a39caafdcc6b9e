//! Average-hash near-duplicate removal and minimum-size filtering.

use serde::{Deserialize, Serialize};

use super::image::image_dims;
use super::Sample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_HAMMING_THRESHOLD: u32 = 5;

/// 64-bit average hash: channel-mean grayscale, 8×8 average pool, then
/// bit `r*8 + c` set when that cell is strictly above the grid mean.
pub fn average_hash(img: &Tensor) -> Result<u64> {
    let (h, w, c) = image_dims(img)?;
    if h == 0 || w == 0 {
        return Err(Error::invalid("cannot hash an empty image"));
    }
    let data = img.data();
    let gray = |y: usize, x: usize| data[(y * w + x) * c..(y * w + x + 1) * c].iter().sum::<f64>() / c as f64;
    let bounds = |i: usize, n: usize| {
        let a = i * n / 8;
        let b = ((i + 1) * n / 8).max(a + 1).min(n);
        (a.min(n - 1), b)
    };
    let mut cells = [0.0f64; 64];
    for r in 0..8 {
        let (y0, y1) = bounds(r, h);
        for col in 0..8 {
            let (x0, x1) = bounds(col, w);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += gray(y, x);
                }
            }
            cells[r * 8 + col] = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    let mean = cells.iter().sum::<f64>() / 64.0;
    Ok(cells.iter().enumerate().fold(0u64, |acc, (i, &v)| if v > mean { acc | (1 << i) } else { acc }))
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub removed_id: String,
    pub kept_id: String,
    pub hamming_distance: u32,
}

/// Keeps the first occurrence of every near-duplicate group in input order.
/// A record is dropped when its hash lies within `threshold` bits of any
/// earlier kept record; the report names the earliest such record.
pub fn dedup_near_duplicates(samples: Vec<Sample>, threshold: u32) -> Result<(Vec<Sample>, Vec<Removal>)> {
    if threshold > 64 {
        return Err(Error::invalid(format!("hamming threshold {threshold} exceeds 64")));
    }
    let mut kept: Vec<(u64, Sample)> = Vec::with_capacity(samples.len());
    let mut removed = Vec::new();
    for s in samples {
        let h = average_hash(&s.image)?;
        match kept.iter().find(|(kh, _)| hamming(*kh, h) <= threshold) {
            Some((kh, k)) => removed.push(Removal {
                removed_id: s.record.id.clone(),
                kept_id: k.record.id.clone(),
                hamming_distance: hamming(*kh, h),
            }),
            None => kept.push((h, s)),
        }
    }
    Ok((kept.into_iter().map(|(_, s)| s).collect(), removed))
}

/// Drops samples whose shorter side is below `min_side`.
pub fn filter_small_images(samples: Vec<Sample>, min_side: usize) -> Vec<Sample> {
    samples.into_iter().filter(|s| s.image.shape()[0].min(s.image.shape()[1]) >= min_side).collect()
}
