//! Calibration capture: per-layer input activations on disk.
//!
//! `manifest.txt` holds one line per dump, `layer_id batch_id shape file`,
//! with the shape written as `rows x cols` (`64x32`). Each file is the raw
//! little-endian f32 tensor.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Example, ForwardHooks, Model};
use crate::tensor::{deserialize_raw, serialize_raw, Tensor};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureEntry {
    pub layer_id: String,
    pub batch_id: usize,
    pub shape: Vec<usize>,
    /// Relative to the capture directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibCapture {
    pub dir: PathBuf,
    pub entries: Vec<CaptureEntry>,
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Per-layer input activations of one batch, in layer order.
pub fn batch_activations(model: &Model, batch: &[Example]) -> Result<Vec<Tensor>> {
    let layers = model.linear_layers();
    let mut rows: Vec<Vec<f32>> = vec![Vec::new(); layers.len()];
    for ex in batch {
        let mut hooks = ForwardHooks {
            act_quant: None,
            capture: Some(&mut rows),
        };
        model.forward_with(ex, &mut hooks)?;
    }
    layers
        .iter()
        .zip(rows)
        .map(|(l, data)| {
            let width = model.params()[l.weight].tensor.shape()[0];
            Tensor::new(vec![data.len() / width, width], data)
        })
        .collect()
}

/// Runs `batches` through the model and dumps every layer's input.
pub fn capture_calibration(model: &Model, batches: &[Vec<Example>], dir: &Path) -> Result<CalibCapture> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (b, batch) in batches.iter().enumerate() {
        let acts = batch_activations(model, batch)?;
        for (layer, t) in model.linear_layers().iter().zip(acts) {
            let file = format!("{}.b{b}.f32", layer.id);
            let path = dir.join(&file);
            fs::write(&path, serialize_raw(&t)).map_err(|e| Error::io(&path, e))?;
            entries.push(CaptureEntry {
                layer_id: layer.id.clone(),
                batch_id: b,
                shape: t.shape().to_vec(),
                file,
            });
        }
    }
    let capture = CalibCapture {
        dir: dir.to_path_buf(),
        entries,
    };
    let manifest = dir.join(MANIFEST);
    crate::format::write_atomic(&manifest, capture.manifest_text().as_bytes())?;
    Ok(capture)
}

impl CalibCapture {
    pub fn manifest_text(&self) -> String {
        let mut s = String::from("# layer_id batch_id shape file\n");
        for e in &self.entries {
            s.push_str(&format!("{} {} {} {}\n", e.layer_id, e.batch_id, shape_text(&e.shape), e.file));
        }
        s
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Config(format!("{}:{}: malformed manifest line `{line}`", path.display(), n + 1));
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [layer_id, batch, shape, file] = parts[..] else {
                return Err(bad());
            };
            let shape = shape
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            if file.contains('/') || file.contains("..") {
                return Err(bad());
            }
            entries.push(CaptureEntry {
                layer_id: layer_id.to_string(),
                batch_id: batch.parse().map_err(|_| bad())?,
                shape,
                file: file.to_string(),
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
        })
    }

    pub fn layer_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !ids.contains(&e.layer_id.as_str()) {
                ids.push(&e.layer_id);
            }
        }
        ids
    }

    /// Reads every batch for `layer_id`, in batch order. File lengths are
    /// checked against the manifest shapes.
    pub fn tensors(&self, layer_id: &str) -> Result<Vec<Tensor>> {
        let mut entries: Vec<&CaptureEntry> = self.entries.iter().filter(|e| e.layer_id == layer_id).collect();
        if entries.is_empty() {
            return Err(Error::Calibration(format!("no captured activations for layer {layer_id}")));
        }
        entries.sort_by_key(|e| e.batch_id);
        entries
            .into_iter()
            .map(|e| {
                let path = self.dir.join(&e.file);
                let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
                deserialize_raw(&bytes, &e.shape).map_err(|err| match err {
                    Error::Format { offset, message } => Error::Format {
                        offset,
                        message: format!("{}: {message}", e.file),
                    },
                    other => other,
                })
            })
            .collect()
    }
}
