//! Reduced-precision emulation.
//!
//! Half precision is emulated by rounding values onto the IEEE-754 binary16
//! grid while keeping `f64` storage.

use std::collections::BTreeSet;

use half::f16;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrecisionMode {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "half-emulated")]
    EmulatedHalf,
}

impl std::str::FromStr for PrecisionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(PrecisionMode::Full),
            "half-emulated" | "half" => Ok(PrecisionMode::EmulatedHalf),
            other => Err(format!("unknown precision `{other}` (expected full or half-emulated)")),
        }
    }
}

/// Operation families, as seen by the precision policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    MatMul,
    Elementwise,
    Reduction,
    LayerNorm,
    Softmax,
    Normalize,
    Movement,
}

/// Which operations run at reduced precision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrecisionPolicy {
    mode: PrecisionMode,
    stable: BTreeSet<OpKind>,
}

impl Default for PrecisionPolicy {
    fn default() -> Self {
        Self::new(PrecisionMode::Full)
    }
}

impl PrecisionPolicy {
    /// Layer normalization and softmax are always in the stable set.
    pub fn new(mode: PrecisionMode) -> Self {
        let stable = [OpKind::LayerNorm, OpKind::Softmax].into_iter().collect();
        PrecisionPolicy { mode, stable }
    }

    pub fn with_stable(mut self, kind: OpKind) -> Self {
        self.stable.insert(kind);
        self
    }

    pub fn mode(&self) -> PrecisionMode {
        self.mode
    }

    pub fn stable_ops(&self) -> &BTreeSet<OpKind> {
        &self.stable
    }

    #[inline]
    pub fn quantizes(&self, kind: OpKind) -> bool {
        self.mode == PrecisionMode::EmulatedHalf && kind != OpKind::Movement && !self.stable.contains(&kind)
    }
}

#[inline]
pub fn round_to_half(x: f64) -> f64 {
    f16::from_f64(x).to_f64()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HalfReport {
    /// Finite inputs whose magnitude exceeded the binary16 range.
    pub overflowed: usize,
}

/// Rounds each element to the nearest binary16 value (ties to even).
/// Values beyond the half range become signed infinities and are counted.
pub fn quantize_to_half(t: &Tensor) -> (Tensor, HalfReport) {
    let mut report = HalfReport::default();
    let data: Vec<f64> = t
        .data()
        .iter()
        .map(|&x| {
            let q = round_to_half(x);
            if x.is_finite() && q.is_infinite() {
                report.overflowed += 1;
            }
            q
        })
        .collect();
    let out = Tensor::with_dtype(t.shape().to_vec(), data, t.dtype()).expect("shape preserved");
    (out, report)
}

pub(crate) fn quantize_in_place(data: &mut [f64]) {
    for x in data {
        *x = round_to_half(*x);
    }
}
