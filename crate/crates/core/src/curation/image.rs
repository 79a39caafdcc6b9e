//! `H×W×C` image tensors: loading, cropping and bilinear resizing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::{read_tensor_file, write_tensor_file, FloatType, Tensor, TensorValue};

/// Checks rank 3 and `C ∈ {1, 3}`; returns `(h, w, c)`.
pub fn image_dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [h, w, c] if c == 1 || c == 3 => Ok((h, w, c)),
        [_, _, c] => Err(Error::shape("image", format!("channel count must be 1 or 3, got {c}"))),
        _ => Err(Error::shape("image", format!("expected H×W×C, got {:?}", img.shape()))),
    }
}

/// Where record images come from.
pub trait ImageSource {
    fn load(&self, image_path: &str) -> Result<Tensor>;
}

/// Container files resolved relative to a root directory.
#[derive(Clone, Debug)]
pub struct DirSource {
    pub root: PathBuf,
}

impl DirSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirSource { root: root.into() }
    }
}

impl ImageSource for DirSource {
    fn load(&self, image_path: &str) -> Result<Tensor> {
        let p = Path::new(image_path);
        let full = if p.is_absolute() { p.to_path_buf() } else { self.root.join(p) };
        let img = read_tensor_file(full)?.to_tensor();
        image_dims(&img)?;
        Ok(img)
    }
}

/// Images held in memory, keyed by path.
#[derive(Clone, Debug, Default)]
pub struct MemorySource(pub BTreeMap<String, Tensor>);

impl ImageSource for MemorySource {
    fn load(&self, image_path: &str) -> Result<Tensor> {
        let img =
            self.0.get(image_path).cloned().ok_or_else(|| Error::invalid(format!("no image at `{image_path}`")))?;
        image_dims(&img)?;
        Ok(img)
    }
}

pub fn save_image(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    image_dims(img)?;
    write_tensor_file(path, &TensorValue::from_tensor(&img.to_dtype(FloatType::F32)))
}

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
pub fn crop(img: &Tensor, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Tensor> {
    let (h, w, c) = image_dims(img)?;
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::invalid(format!("zero-area box ({x0},{y0})-({x1},{y1})")));
    }
    if x1 > w || y1 > h {
        return Err(Error::invalid(format!("box ({x0},{y0})-({x1},{y1}) outside {w}×{h} image")));
    }
    let mut out = Vec::with_capacity((y1 - y0) * (x1 - x0) * c);
    for y in y0..y1 {
        out.extend_from_slice(&img.data()[(y * w + x0) * c..(y * w + x1) * c]);
    }
    Tensor::with_dtype(vec![y1 - y0, x1 - x0, c], out, img.dtype())
}

/// Bilinear resize with half-pixel centres and edge clamping. Resizing to
/// the same extent is the identity.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = image_dims(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = vec![0.0; out_h * out_w * c];
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * out_w + ox) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::with_dtype(vec![out_h, out_w, c], out, img.dtype())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::new(vec![h, w, 1], (0..h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn crop_extracts_the_box() {
        let img = ramp(4, 5);
        let c = crop(&img, 1, 2, 3, 4).unwrap();
        assert_eq!(c.shape(), &[2, 2, 1]);
        assert_eq!(c.data(), &[11.0, 12.0, 16.0, 17.0]);
        assert!(crop(&img, 2, 0, 2, 3).is_err());
        assert!(crop(&img, 0, 0, 6, 3).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp(4, 4);
        assert!(resize_bilinear(&img, 4, 4).unwrap().bit_eq(&img));
        let flat = Tensor::full(vec![3, 5, 3], 0.25);
        let r = resize_bilinear(&flat, 8, 7).unwrap();
        assert!(r.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let img = Tensor::new(vec![1, 4, 1], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let r = resize_bilinear(&img, 1, 2).unwrap();
        assert_eq!(r.data(), &[1.0, 5.0]);
    }

    #[test]
    fn rejects_bad_channel_counts() {
        assert!(image_dims(&Tensor::zeros(vec![2, 2, 2])).is_err());
        assert!(image_dims(&Tensor::zeros(vec![2, 2])).is_err());
    }
}
