//! Symmetric int8 quantization: `Q(v) = round(clip(v / s, -127, 127))` and its inverse.

use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

/// Integer bound of the symmetric int8 grid.
pub const INT8_BOUND: i32 = 127;

/// Per-tensor scale `s` together with the integer bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    scale: f32,
    bound: i32,
}

impl QuantParams {
    pub fn new(scale: f32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Value(format!("quantization scale must be positive and finite, got {scale}")));
        }
        Ok(Self {
            scale,
            bound: INT8_BOUND,
        })
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn bound(&self) -> i32 {
        self.bound
    }

    /// Quantizes a single value. Division happens in f64 so the rounding
    /// decision is exact for every pair of f32 operands.
    #[inline]
    pub fn quantize_value(&self, v: f32) -> i8 {
        let b = self.bound as f64;
        let x = (v as f64 / self.scale as f64).clamp(-b, b);
        // f64::round is half-away-from-zero.
        x.round() as i8
    }

    #[inline]
    pub fn dequantize_value(&self, q: i8) -> f32 {
        self.scale * q as f32
    }

    /// `DQ(Q(v))` for one value.
    #[inline]
    pub fn fake_quant_value(&self, v: f32) -> f32 {
        self.dequantize_value(self.quantize_value(v))
    }
}

pub fn quantize(v: &Tensor, p: &QuantParams) -> Result<IntTensor> {
    // Tensor construction already guarantees finiteness.
    let data = v.data().iter().map(|x| p.quantize_value(*x)).collect();
    IntTensor::new(v.shape().to_vec(), data)
}

pub fn dequantize(q: &IntTensor, p: &QuantParams) -> Tensor {
    let data = q.data().iter().map(|x| p.dequantize_value(*x)).collect();
    Tensor::new(q.shape().to_vec(), data).expect("bounded ints times a finite scale stay finite")
}

/// Quantize-then-dequantize, the simulated int8 path.
pub fn fake_quantize(v: &Tensor, p: &QuantParams) -> Tensor {
    let data = v.data().iter().map(|x| p.fake_quant_value(*x)).collect();
    Tensor::new(v.shape().to_vec(), data).expect("fake-quantized values stay finite")
}

/// Rejects inputs that must not enter a compression path.
pub fn quantize_checked(values: &[f32], p: &QuantParams) -> Result<Vec<i8>> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if v.is_finite() {
                Ok(p.quantize_value(*v))
            } else {
                Err(Error::Value(format!("non-finite value {v} at flat offset {i}")))
            }
        })
        .collect()
}
