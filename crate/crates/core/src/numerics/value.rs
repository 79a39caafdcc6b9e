use serde::{Deserialize, Serialize};

use super::tensor::{FloatType, Tensor};
use crate::error::{Error, Result};

/// Storage dtype of a [`TensorValue`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn is_float(self) -> bool {
        !matches!(self, DType::U8)
    }
}

impl From<FloatType> for DType {
    fn from(f: FloatType) -> Self {
        match f {
            FloatType::F32 => DType::F32,
            FloatType::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }
}

/// A stored tensor with its native element type: the unit of persistence.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorValue {
    shape: Vec<usize>,
    data: TensorData,
    requires_grad: bool,
}

impl TensorValue {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor value", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(TensorValue { shape, data, requires_grad: false })
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Result<Self> {
        if requires_grad && !self.dtype().is_float() {
            return Err(Error::invalid("gradient-bearing tensors must be floating point"));
        }
        self.requires_grad = requires_grad;
        Ok(self)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let data = match t.dtype() {
            FloatType::F64 => TensorData::F64(t.data().to_vec()),
            FloatType::F32 => TensorData::F32(t.data().iter().map(|&x| x as f32).collect()),
        };
        TensorValue { shape: t.shape().to_vec(), data, requires_grad: false }
    }

    /// Compute view; `u8` data widens to `f64`.
    pub fn to_tensor(&self) -> Tensor {
        let (data, dtype) = match &self.data {
            TensorData::F64(v) => (v.clone(), FloatType::F64),
            TensorData::F32(v) => (v.iter().map(|&x| x as f64).collect(), FloatType::F32),
            TensorData::U8(v) => (v.iter().map(|&x| x as f64).collect(), FloatType::F64),
        };
        Tensor::raw(self.shape.clone(), data, dtype, false)
    }
}
