//! Label-free mixed precision: per-layer fake-quant MSE and Top-K float32 fallback.
//!
//! The cost of layer `j` is the mean, over calibration batches, of
//! `MSE(H_j(a, w), DQ(H_j(Q(a), Q(w))))` where both paths see the same float
//! input `a`. Nothing here consumes labels.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::{mse, Tensor};

pub const DEFAULT_FALLBACK_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    Int8,
    Float32,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Int8 => "int8",
            Precision::Float32 => "float32",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "int8" => Ok(Precision::Int8),
            "float32" => Ok(Precision::Float32),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

/// A layer whose float and quantized forward passes can be compared.
pub trait QuantizableLayer {
    fn id(&self) -> &str;

    /// `H(a, w)`.
    fn forward_float(&self, a: &Tensor) -> Result<Tensor>;

    /// `DQ(H(Q(a), Q(w)))`.
    fn forward_quantized(&self, a: &Tensor, wq: &QuantParams, aq: &QuantParams) -> Result<Tensor>;
}

/// `y = a W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct LinearLayer<'a> {
    pub id: &'a str,
    pub weight: &'a Tensor,
    pub bias: Option<&'a Tensor>,
}

impl LinearLayer<'_> {
    fn dims(&self, a: &Tensor) -> Result<(usize, usize, usize)> {
        let (rows, k) = match a.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::dim(format!("{}: activations must be rank 2, got {s:?}", self.id))),
        };
        let (k2, n) = match self.weight.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::dim(format!("{}: weight must be rank 2, got {s:?}", self.id))),
        };
        if k != k2 {
            return Err(Error::dim(format!(
                "{}: activation width {k} does not match weight rows {k2}",
                self.id
            )));
        }
        if let Some(b) = self.bias {
            if b.len() != n {
                return Err(Error::dim(format!("{}: bias length {} != {n}", self.id, b.len())));
            }
        }
        Ok((rows, k, n))
    }

    fn add_bias(&self, out: &mut [f32], n: usize) {
        if let Some(b) = self.bias {
            for row in out.chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
        }
    }
}

impl QuantizableLayer for LinearLayer<'_> {
    fn id(&self) -> &str {
        self.id
    }

    fn forward_float(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, k, n) = self.dims(a)?;
        let (ad, wd) = (a.data(), self.weight.data());
        let mut out = vec![0.0f32; rows * n];
        for r in 0..rows {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += ad[r * k + p] as f64 * wd[p * n + j] as f64;
                }
                out[r * n + j] = acc as f32;
            }
        }
        self.add_bias(&mut out, n);
        Tensor::new(vec![rows, n], out)
    }

    fn forward_quantized(&self, a: &Tensor, wq: &QuantParams, aq: &QuantParams) -> Result<Tensor> {
        let (rows, k, n) = self.dims(a)?;
        let qa: Vec<i32> = a.data().iter().map(|v| aq.quantize_value(*v) as i32).collect();
        let qw: Vec<i32> = self.weight.data().iter().map(|v| wq.quantize_value(*v) as i32).collect();
        let rescale = aq.scale() as f64 * wq.scale() as f64;
        let mut out = vec![0.0f32; rows * n];
        for r in 0..rows {
            for j in 0..n {
                let mut acc = 0i32;
                for p in 0..k {
                    acc += qa[r * k + p] * qw[p * n + j];
                }
                out[r * n + j] = (acc as f64 * rescale) as f32;
            }
        }
        self.add_bias(&mut out, n);
        Tensor::new(vec![rows, n], out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostNorm {
    /// Plain MSE.
    #[default]
    Plain,
    /// MSE divided by the mean square of the float output.
    Relative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub layer_id: String,
    pub cost: f64,
    pub sample_count: usize,
}

pub fn layer_cost(
    layer: &dyn QuantizableLayer,
    calib: &[Tensor],
    wq: &QuantParams,
    aq: &QuantParams,
) -> Result<LayerCost> {
    layer_cost_with(layer, calib, wq, aq, CostNorm::Plain)
}

pub fn layer_cost_with(
    layer: &dyn QuantizableLayer,
    calib: &[Tensor],
    wq: &QuantParams,
    aq: &QuantParams,
    norm: CostNorm,
) -> Result<LayerCost> {
    if calib.is_empty() {
        return Err(Error::Calibration(format!(
            "no calibration samples for layer {}",
            layer.id()
        )));
    }
    let mut total = 0.0;
    for a in calib {
        let reference = layer.forward_float(a)?;
        let quantized = layer.forward_quantized(a, wq, aq)?;
        let mut err = mse(&reference, &quantized)?;
        if norm == CostNorm::Relative {
            let power = reference.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>()
                / reference.len() as f64;
            if power > 0.0 {
                err /= power;
            }
        }
        total += err;
    }
    Ok(LayerCost {
        layer_id: layer.id().to_string(),
        cost: total / calib.len() as f64,
        sample_count: calib.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub layer_id: String,
    pub precision: Precision,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionPlan {
    /// In the order the costs were supplied (network order).
    pub entries: Vec<PlanEntry>,
    pub k: usize,
    /// Layers kept in float32 unconditionally; not part of the Top-K budget.
    pub excluded: Vec<String>,
}

impl PrecisionPlan {
    pub fn precision_of(&self, layer_id: &str) -> Option<Precision> {
        self.entries
            .iter()
            .find(|e| e.layer_id == layer_id)
            .map(|e| e.precision)
    }

    /// Layers that fell back to float32 through the Top-K budget.
    pub fn fallback_layers(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.precision == Precision::Float32 && !self.excluded.contains(&e.layer_id))
            .map(|e| e.layer_id.as_str())
            .collect()
    }

    /// Every layer in the given precision.
    pub fn uniform(layer_ids: &[String], precision: Precision, excluded: &[String]) -> Self {
        Self {
            entries: layer_ids
                .iter()
                .map(|id| PlanEntry {
                    layer_id: id.clone(),
                    precision: if excluded.contains(id) { Precision::Float32 } else { precision },
                    cost: 0.0,
                })
                .collect(),
            k: 0,
            excluded: excluded.to_vec(),
        }
    }

    /// Text form: comment header, then one `layer_id precision cost` line per layer.
    pub fn to_text(&self) -> String {
        let mut out = format!("# amp plan k={}\n", self.k);
        for e in &self.excluded {
            out.push_str(&format!("# excluded {e}\n"));
        }
        for e in &self.entries {
            out.push_str(&format!("{} {} {:e}\n", e.layer_id, e.precision, e.cost));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut plan = PrecisionPlan {
            entries: Vec::new(),
            k: 0,
            excluded: Vec::new(),
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(k) = rest.strip_prefix("amp plan k=") {
                    plan.k = k
                        .parse()
                        .map_err(|_| Error::Config(format!("plan line {}: bad k `{k}`", n + 1)))?;
                } else if let Some(id) = rest.strip_prefix("excluded ") {
                    plan.excluded.push(id.trim().to_string());
                }
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [id, prec, cost] = parts.as_slice() else {
                return Err(Error::Config(format!(
                    "plan line {}: expected `layer_id precision cost`",
                    n + 1
                )));
            };
            plan.entries.push(PlanEntry {
                layer_id: id.to_string(),
                precision: prec.parse()?,
                cost: cost
                    .parse()
                    .map_err(|_| Error::Config(format!("plan line {}: bad cost `{cost}`", n + 1)))?,
            });
        }
        Ok(plan)
    }
}

/// Marks the `k` eligible layers with the largest cost as float32.
/// Ties go to the lexicographically smaller layer id.
pub fn select_fallback(costs: &[LayerCost], k: usize, excluded: &[String]) -> Result<PrecisionPlan> {
    let mut seen = BTreeSet::new();
    for c in costs {
        if !seen.insert(c.layer_id.as_str()) {
            return Err(Error::Config(format!("duplicate layer id `{}`", c.layer_id)));
        }
        if !(c.cost.is_finite() && c.cost >= 0.0) {
            return Err(Error::Value(format!("layer {} has invalid cost {}", c.layer_id, c.cost)));
        }
    }
    let mut eligible: Vec<&LayerCost> = costs
        .iter()
        .filter(|c| !excluded.contains(&c.layer_id))
        .collect();
    if k > eligible.len() {
        return Err(Error::Config(format!(
            "fallback budget {k} exceeds the {} eligible layers",
            eligible.len()
        )));
    }
    eligible.sort_by(|a, b| b.cost.total_cmp(&a.cost).then_with(|| a.layer_id.cmp(&b.layer_id)));
    let fallback: BTreeSet<&str> = eligible[..k].iter().map(|c| c.layer_id.as_str()).collect();
    let entries = costs
        .iter()
        .map(|c| PlanEntry {
            layer_id: c.layer_id.clone(),
            precision: if excluded.contains(&c.layer_id) || fallback.contains(c.layer_id.as_str()) {
                Precision::Float32
            } else {
                Precision::Int8
            },
            cost: c.cost,
        })
        .collect();
    Ok(PrecisionPlan {
        entries,
        k,
        excluded: excluded.to_vec(),
    })
}
