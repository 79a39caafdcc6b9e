//! Dense row-major compute tensor.
//!
//! All arithmetic runs in `f64`. A tensor tagged [`FloatType::F32`] has every
//! value rounded to the nearest `f32` whenever it is produced by an operation,
//! so results carry single-precision semantics without a second code path.
//!
//! Buffers produced by graph operations are *activations*: they register
//! their scalar count with a thread-local meter on creation and release it on
//! drop. The meter's peak is what the memory harness reports.

use std::cell::Cell;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloatType {
    F32,
    F64,
}

impl FloatType {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            FloatType::F64 => x,
            FloatType::F32 => x as f32 as f64,
        }
    }

    pub(crate) fn round_all(self, data: &mut [f64]) {
        if self == FloatType::F32 {
            for x in data {
                *x = *x as f32 as f64;
            }
        }
    }
}

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Thread-local accounting of live activation scalars.
pub struct ActivationMeter;

impl ActivationMeter {
    pub fn live() -> usize {
        LIVE.with(Cell::get)
    }

    pub fn peak() -> usize {
        PEAK.with(Cell::get)
    }

    pub fn reset_peak() {
        let live = Self::live();
        PEAK.with(|p| p.set(live));
    }

    /// Runs `f` and returns its result with the peak number of activation
    /// scalars that were live at once above the level on entry.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, usize) {
        let base = Self::live();
        let saved_peak = Self::peak();
        PEAK.with(|p| p.set(base));
        let out = f();
        let peak = Self::peak();
        PEAK.with(|p| p.set(saved_peak.max(peak)));
        (out, peak - base)
    }

    fn add(n: usize) {
        let live = LIVE.with(|l| {
            let v = l.get() + n;
            l.set(v);
            v
        });
        PEAK.with(|p| {
            if live > p.get() {
                p.set(live)
            }
        });
    }

    fn sub(n: usize) {
        LIVE.with(|l| l.set(l.get().saturating_sub(n)));
    }
}

struct Buffer {
    data: Vec<f64>,
    tracked: bool,
}

impl Drop for Buffer {
    fn drop(&mut self) {
        if self.tracked {
            ActivationMeter::sub(self.data.len());
        }
    }
}

/// Immutable dense tensor. Cloning shares the buffer.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: FloatType,
    buf: Arc<Buffer>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let head: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor").field("shape", &self.shape).field("dtype", &self.dtype).field("head", &head).finish()
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, data, FloatType::F64)
    }

    pub fn with_dtype(shape: impl Into<Vec<usize>>, mut data: Vec<f64>, dtype: FloatType) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        dtype.round_all(&mut data);
        Ok(Self::raw(shape, data, dtype, false))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>, dtype: FloatType, tracked: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if tracked {
            ActivationMeter::add(data.len());
        }
        Tensor { shape, dtype, buf: Arc::new(Buffer { data, tracked }) }
    }

    /// Builds a tracked activation; values are rounded to `dtype`.
    pub(crate) fn activation(shape: Vec<usize>, mut data: Vec<f64>, dtype: FloatType) -> Self {
        dtype.round_all(&mut data);
        Self::raw(shape, data, dtype, true)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::raw(shape, vec![0.0; n], FloatType::F64, false)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::raw(shape, vec![value; n], FloatType::F64, false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(Vec::new(), vec![value], FloatType::F64, false)
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::raw(vec![n], data, FloatType::F64, false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> FloatType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.buf.data
    }

    pub fn numel(&self) -> usize {
        self.buf.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// First element; meant for scalars.
    pub fn item(&self) -> f64 {
        self.buf.data[0]
    }

    /// Same buffer viewed with another shape.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        Ok(Tensor { shape, dtype: self.dtype, buf: Arc::clone(&self.buf) })
    }

    /// Untracked deep copy converted to `dtype`.
    pub fn to_dtype(&self, dtype: FloatType) -> Self {
        let mut data = self.data().to_vec();
        dtype.round_all(&mut data);
        Self::raw(self.shape.clone(), data, dtype, false)
    }

    /// Untracked deep copy; detaches the value from activation accounting.
    pub fn detached(&self) -> Self {
        Self::raw(self.shape.clone(), self.data().to_vec(), self.dtype, false)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        self.dtype.round_all(&mut data);
        Self::raw(self.shape.clone(), data, self.dtype, false)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data()[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Rows `idx` of a rank-2 (or higher, leading-axis) tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&self.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::raw(shape, data, self.dtype, false)
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::raw(shape, data, first.dtype, false))
    }

    /// Bitwise equality of shape, dtype and every value.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.dtype == other.dtype
            && self.data().iter().zip(other.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data().iter().zip(other.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data().iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data().iter().zip(other.data()).map(|(a, b)| a * b).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data().iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}
