//! Weight-scale refinement by alternating projection with winner-take-all selection.
//!
//! Each step projects the weights onto the int8 grid at the current scale and
//! then solves the least-squares scale for that integer assignment:
//!
//! ```text
//! q_i     = clip(round(w_i / s_k), -127, 127)
//! s_{k+1} = sum(w_i * q_i) / sum(q_i^2)
//! ```
//!
//! The MSE of every visited scale is recorded and the scale with the smallest
//! MSE is returned. This is a local method: it settles into the basin around
//! its starting scale.

use crate::error::{Error, Result};
use crate::quant::{QuantParams, INT8_BOUND};
use crate::tensor::Tensor;

pub const DEFAULT_ITERS: usize = 50;
pub const DEFAULT_REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    pub scale: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmTrace {
    pub steps: Vec<TraceStep>,
    /// Index of the smallest MSE; the earliest one on ties.
    pub best_index: usize,
}

impl AdmmTrace {
    pub fn best(&self) -> TraceStep {
        self.steps[self.best_index]
    }
}

/// `max|w| / 127`, the scale at which nothing clips.
pub fn maxabs_scale(w: &Tensor) -> Result<f32> {
    let m = w.max_abs();
    if m == 0.0 {
        return Err(Error::Calibration("cannot derive a scale from an all-zero tensor".into()));
    }
    Ok(m / INT8_BOUND as f32)
}

#[inline]
fn project(v: f64, scale: f64) -> f64 {
    let b = INT8_BOUND as f64;
    (v / scale).clamp(-b, b).round()
}

/// Reconstruction MSE of `w` quantized at `scale`.
pub fn quant_mse(w: &[f32], scale: f64) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    let sum: f64 = w
        .iter()
        .map(|x| {
            let x = *x as f64;
            let d = x - scale * project(x, scale);
            d * d
        })
        .sum();
    sum / w.len() as f64
}

pub fn admm_refine(w: &Tensor, s0: f32, iters: usize) -> Result<(QuantParams, AdmmTrace)> {
    admm_refine_with_tol(w, s0, iters, DEFAULT_REL_TOL)
}

pub fn admm_refine_with_tol(
    w: &Tensor,
    s0: f32,
    iters: usize,
    rel_tol: f64,
) -> Result<(QuantParams, AdmmTrace)> {
    if w.max_abs() == 0.0 {
        return Err(Error::Calibration("ADMM needs a tensor with a non-zero weight".into()));
    }
    if !(s0.is_finite() && s0 > 0.0) {
        return Err(Error::Value(format!("initial scale must be positive, got {s0}")));
    }
    if iters == 0 {
        return Err(Error::Config("ADMM needs at least one iteration".into()));
    }

    let data = w.data();
    let mut steps = Vec::with_capacity(iters);
    let mut scale = s0 as f64;
    for _ in 0..iters {
        steps.push(TraceStep {
            scale,
            mse: quant_mse(data, scale),
        });
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for x in data {
            let x = *x as f64;
            let q = project(x, scale);
            num += x * q;
            den += q * q;
        }
        if den == 0.0 {
            break;
        }
        let next = num / den;
        if !(next.is_finite() && next > 0.0) {
            break;
        }
        if ((next - scale) / scale).abs() < rel_tol {
            break;
        }
        scale = next;
    }

    let best_index = steps
        .iter()
        .enumerate()
        .fold(0, |b, (i, s)| if s.mse < steps[b].mse { i } else { b });
    let params = QuantParams::new(steps[best_index].scale as f32)?;
    Ok((params, AdmmTrace { steps, best_index }))
}

/// ADMM started from the max-abs scale with the default budget.
pub fn optimize_weight_scale(w: &Tensor) -> Result<(QuantParams, AdmmTrace)> {
    admm_refine(w, maxabs_scale(w)?, DEFAULT_ITERS)
}
