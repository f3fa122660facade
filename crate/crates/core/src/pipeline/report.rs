use std::collections::BTreeMap;

use super::config::QuantStrategy;
use crate::calib::HistMode;
use crate::error::{Error, Result};
use crate::format::SizeReport;
use crate::model::Accuracy;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub float_accuracy: Accuracy,
    pub quant_accuracy: Accuracy,
    /// Mean over examples of the logits MSE between float and quantized runs.
    pub logits_mse: f64,
}

fn kv(text: &str) -> BTreeMap<&str, &str> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect()
}

fn get<T: std::str::FromStr>(map: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    map.get(key)
        .ok_or_else(|| Error::Config(format!("missing `{key}`")))?
        .parse()
        .map_err(|_| Error::Config(format!("bad value for `{key}`")))
}

impl EvalSummary {
    /// Drop in sequence accuracy, in percentage points.
    pub fn accuracy_drop_pp(&self) -> f64 {
        100.0 * (self.float_accuracy.sequence - self.quant_accuracy.sequence)
    }

    pub fn to_text(&self) -> String {
        // `{:?}` on f64 prints the shortest round-tripping form.
        format!(
            "float_seq_acc={:?}\nfloat_tok_acc={:?}\nquant_seq_acc={:?}\nquant_tok_acc={:?}\nlogits_mse={:?}\n",
            self.float_accuracy.sequence,
            self.float_accuracy.token,
            self.quant_accuracy.sequence,
            self.quant_accuracy.token,
            self.logits_mse
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let m = kv(text);
        Ok(Self {
            float_accuracy: Accuracy {
                sequence: get(&m, "float_seq_acc")?,
                token: get(&m, "float_tok_acc")?,
            },
            quant_accuracy: Accuracy {
                sequence: get(&m, "quant_seq_acc")?,
                token: get(&m, "quant_tok_acc")?,
            },
            logits_mse: get(&m, "logits_mse")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    /// Strategy label: KL, KL†, KL+AMP(k), KL†+AMP(k) or float32.
    pub row: String,
    pub sparsity: f64,
    pub calib_mode: HistMode,
    pub strategy: QuantStrategy,
    pub amp_k: usize,
    /// Eligible layers sent back to float32 by AMP.
    pub fallback_layers: Vec<String>,
    /// Layers never quantized.
    pub excluded: Vec<String>,
    pub eval: EvalSummary,
    pub size: SizeReport,
}

impl PipelineReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<16} {:>8} {:>10} {:>10} {:>10} {:>12} {:>8}\n",
            "method", "sparsity", "float_acc", "quant_acc", "logit_mse", "bytes", "CR"
        ));
        s.push_str(&format!(
            "{:<16} {:>7.0}% {:>10.4} {:>10.4} {:>10.3e} {:>12} {:>7.3}x\n",
            self.row,
            self.sparsity * 100.0,
            self.eval.float_accuracy.sequence,
            self.eval.quant_accuracy.sequence,
            self.eval.logits_mse,
            self.size.total_bytes,
            self.size.compression_ratio
        ));
        s.push('\n');
        s.push_str(&self.size.to_text());
        s.push_str("\n[summary]\n");
        s.push_str(&format!("row={}\n", self.row));
        s.push_str(&format!("sparsity={}\n", self.sparsity));
        s.push_str(&format!("calib_mode={}\n", self.calib_mode.name()));
        s.push_str(&format!("strategy={}\n", self.strategy));
        s.push_str(&format!("amp_k={}\n", self.amp_k));
        s.push_str(&format!("fallback_layers={}\n", self.fallback_layers.join(",")));
        s.push_str(&format!("excluded={}\n", self.excluded.join(",")));
        s.push_str(&self.eval.to_text());
        s.push_str(&format!("accuracy_drop_pp={:?}\n", self.eval.accuracy_drop_pp()));
        s.push_str(&format!("total_bytes={}\n", self.size.total_bytes));
        s.push_str(&format!("baseline_bytes={}\n", self.size.baseline_bytes));
        s.push_str(&format!("compression_ratio={:?}\n", self.size.compression_ratio));
        s
    }
}
