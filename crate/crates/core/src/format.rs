//! LFAM: a chunked little-endian container for compressed models.
//!
//! ```text
//! header   "LFAM" | version u16 | flags u16 | chunk_count u32          12 bytes
//! table    chunk_count x { offset u64, length u64 }                     16 bytes each
//! chunk    name_len u16 | name | encoding u8 | rank u8 | dims u32*rank | payload
//! ```
//!
//! Payloads:
//! - DenseF32: `4n` bytes.
//! - DenseI8: scale f32, then `n` values.
//! - SparseI8: scale f32, keep-bitmap of `ceil(n/8)` bytes (LSB first), then
//!   the values at kept positions in flat order.
//! - Text: UTF-8, rank 0.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::quant::{quantize, QuantParams};
use crate::sparsify::SparseMask;
use crate::tensor::{IntTensor, Tensor};

pub const MAGIC: &[u8; 4] = b"LFAM";
pub const VERSION: u16 = 0x0100;
pub const HEADER_LEN: usize = 12;
pub const TABLE_ENTRY_LEN: usize = 16;
/// Name of the text chunk describing the graph.
pub const META_CHUNK: &str = "__graph__";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Encoding {
    DenseF32 = 0,
    DenseI8 = 1,
    SparseI8 = 2,
    Text = 3,
}

impl Encoding {
    fn from_byte(b: u8, offset: usize) -> Result<Self> {
        Ok(match b {
            0 => Encoding::DenseF32,
            1 => Encoding::DenseI8,
            2 => Encoding::SparseI8,
            3 => Encoding::Text,
            _ => return Err(Error::format(offset, format!("unknown encoding {b}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Encoding::DenseF32 => "dense-f32",
            Encoding::DenseI8 => "dense-i8",
            Encoding::SparseI8 => "sparse-i8",
            Encoding::Text => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    DenseF32(Tensor),
    DenseI8 {
        params: QuantParams,
        values: IntTensor,
    },
    SparseI8 {
        params: QuantParams,
        shape: Vec<usize>,
        keep: Vec<bool>,
        /// Values at kept positions only.
        values: Vec<i8>,
    },
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub name: String,
    pub payload: Payload,
}

/// Payload bytes for `elements` values of which `kept` survive the mask.
pub fn payload_len(encoding: Encoding, elements: usize, kept: usize) -> usize {
    match encoding {
        Encoding::DenseF32 => 4 * elements,
        Encoding::DenseI8 => 4 + elements,
        Encoding::SparseI8 => 4 + elements.div_ceil(8) + kept,
        Encoding::Text => elements,
    }
}

/// Full chunk length: name prefix, encoding, rank, dims and payload.
pub fn chunk_len(name_len: usize, rank: usize, encoding: Encoding, elements: usize, kept: usize) -> usize {
    2 + name_len + 1 + 1 + 4 * rank + payload_len(encoding, elements, kept)
}

impl Chunk {
    pub fn dense_f32(name: impl Into<String>, t: Tensor) -> Self {
        Self {
            name: name.into(),
            payload: Payload::DenseF32(t),
        }
    }

    pub fn dense_i8(name: impl Into<String>, t: &Tensor, params: QuantParams) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            payload: Payload::DenseI8 {
                params,
                values: quantize(t, &params)?,
            },
        })
    }

    pub fn sparse_i8(name: impl Into<String>, t: &Tensor, keep: &[bool], params: QuantParams) -> Result<Self> {
        let name = name.into();
        if keep.len() != t.len() {
            return Err(Error::format(
                0,
                format!("{name}: mask has {} entries for {} elements", keep.len(), t.len()),
            ));
        }
        let q = quantize(t, &params)?;
        let values = q.data().iter().zip(keep).filter(|(_, k)| **k).map(|(v, _)| *v).collect();
        Ok(Self {
            name,
            payload: Payload::SparseI8 {
                params,
                shape: t.shape().to_vec(),
                keep: keep.to_vec(),
                values,
            },
        })
    }

    pub fn text(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            payload: Payload::Text(text.into()),
        }
    }

    pub fn encoding(&self) -> Encoding {
        match self.payload {
            Payload::DenseF32(_) => Encoding::DenseF32,
            Payload::DenseI8 { .. } => Encoding::DenseI8,
            Payload::SparseI8 { .. } => Encoding::SparseI8,
            Payload::Text(_) => Encoding::Text,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match &self.payload {
            Payload::DenseF32(t) => t.shape(),
            Payload::DenseI8 { values, .. } => values.shape(),
            Payload::SparseI8 { shape, .. } => shape,
            Payload::Text(_) => &[],
        }
    }

    pub fn scale(&self) -> Option<QuantParams> {
        match &self.payload {
            Payload::DenseI8 { params, .. } | Payload::SparseI8 { params, .. } => Some(*params),
            _ => None,
        }
    }

    /// Integer values with zeros restored at masked positions.
    pub fn to_int_tensor(&self) -> Result<Option<IntTensor>> {
        match &self.payload {
            Payload::DenseI8 { values, .. } => Ok(Some(values.clone())),
            Payload::SparseI8 {
                shape, keep, values, ..
            } => {
                let mut it = values.iter();
                let data = keep.iter().map(|k| if *k { *it.next().unwrap_or(&0) } else { 0 }).collect();
                Ok(Some(IntTensor::new(shape.clone(), data)?))
            }
            _ => Ok(None),
        }
    }

    /// Float view: stored floats, or dequantized integers.
    pub fn to_tensor(&self) -> Result<Tensor> {
        match &self.payload {
            Payload::DenseF32(t) => Ok(t.clone()),
            Payload::Text(_) => Err(Error::Value(format!("{} is a text chunk", self.name))),
            _ => {
                let p = self.scale().expect("integer chunks carry a scale");
                let q = self.to_int_tensor()?.expect("integer chunk");
                Ok(crate::quant::dequantize(&q, &p))
            }
        }
    }

    pub fn kept(&self) -> usize {
        match &self.payload {
            Payload::SparseI8 { values, .. } => values.len(),
            _ => self.element_count(),
        }
    }

    fn element_count(&self) -> usize {
        match &self.payload {
            Payload::Text(s) => s.len(),
            _ => self.shape().iter().product(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        chunk_len(
            self.name.len(),
            self.shape().len(),
            self.encoding(),
            self.element_count(),
            self.kept(),
        )
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.name.len() > u16::MAX as usize {
            return Err(Error::format(0, format!("tensor name of {} bytes is too long", self.name.len())));
        }
        let shape = self.shape();
        if shape.len() > u8::MAX as usize || shape.iter().any(|d| *d > u32::MAX as usize) {
            return Err(Error::format(0, format!("{}: shape {shape:?} does not fit the header", self.name)));
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.name.len() as u16).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.push(self.encoding() as u8);
        out.push(shape.len() as u8);
        for d in shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        match &self.payload {
            Payload::DenseF32(t) => {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::DenseI8 { params, values } => {
                out.extend_from_slice(&params.scale().to_le_bytes());
                out.extend(values.data().iter().map(|v| *v as u8));
            }
            Payload::SparseI8 {
                params, keep, values, ..
            } => {
                if keep.iter().filter(|k| **k).count() != values.len() {
                    return Err(Error::format(0, format!("{}: bitmap popcount differs from value count", self.name)));
                }
                out.extend_from_slice(&params.scale().to_le_bytes());
                let mut bitmap = vec![0u8; keep.len().div_ceil(8)];
                for (i, k) in keep.iter().enumerate() {
                    if *k {
                        bitmap[i / 8] |= 1 << (i % 8);
                    }
                }
                out.extend_from_slice(&bitmap);
                out.extend(values.iter().map(|v| *v as u8));
            }
            Payload::Text(s) => out.extend_from_slice(s.as_bytes()),
        }
        debug_assert_eq!(out.len(), self.encoded_len());
        Ok(out)
    }

    /// Decodes one chunk; `base` is its offset in the enclosing file, for errors.
    pub fn decode(bytes: &[u8], base: usize) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, base, name: None };
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format(base + 2, "tensor name is not UTF-8"))?;
        r.name = Some(name.clone());
        let enc_at = r.pos;
        let encoding = Encoding::from_byte(r.u8()?, base + enc_at)?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = match encoding {
            Encoding::DenseF32 => {
                let raw = r.take(4 * n)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Payload::DenseF32(Tensor::new(shape, data).map_err(|e| r.err(e.to_string()))?)
            }
            Encoding::DenseI8 => {
                let params = r.scale()?;
                let at = r.pos;
                let data: Vec<i8> = r.take(n)?.iter().map(|b| *b as i8).collect();
                let values = IntTensor::new(shape, data).map_err(|e| Error::format(base + at, format!("{name}: {e}")))?;
                Payload::DenseI8 { params, values }
            }
            Encoding::SparseI8 => {
                let params = r.scale()?;
                let bitmap = r.take(n.div_ceil(8))?;
                let keep: Vec<bool> = (0..n).map(|i| bitmap[i / 8] >> (i % 8) & 1 == 1).collect();
                let kept = keep.iter().filter(|k| **k).count();
                let at = r.pos;
                let values: Vec<i8> = r.take(kept)?.iter().map(|b| *b as i8).collect();
                if let Some(p) = values.iter().position(|v| *v == i8::MIN) {
                    return Err(Error::format(base + at + p, format!("{name}: value -128 is out of range")));
                }
                Payload::SparseI8 {
                    params,
                    shape,
                    keep,
                    values,
                }
            }
            Encoding::Text => {
                if rank != 0 {
                    return Err(r.err("text chunk must have rank 0".into()));
                }
                let rest = r.take(bytes.len() - r.pos)?;
                Payload::Text(
                    String::from_utf8(rest.to_vec()).map_err(|_| r.err("text chunk is not UTF-8".into()))?,
                )
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::format(
                base + r.pos,
                format!("{name}: {} trailing bytes (popcount or length mismatch)", bytes.len() - r.pos),
            ));
        }
        Ok(Self { name, payload })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
    name: Option<String>,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: String) -> Error {
        match &self.name {
            Some(n) => Error::format(self.base + self.pos, format!("{n}: {msg}")),
            None => Error::format(self.base + self.pos, msg),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn scale(&mut self) -> Result<QuantParams> {
        let at = self.pos;
        let s = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        QuantParams::new(s).map_err(|e| {
            let n = self.name.clone().unwrap_or_default();
            Error::format(self.base + at, format!("{n}: {e}"))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompressedModel {
    pub flags: u16,
    pub chunks: Vec<Chunk>,
}

impl CompressedModel {
    pub fn chunk(&self, name: &str) -> Option<&Chunk> {
        self.chunks.iter().find(|c| c.name == name)
    }

    /// Closed-form file size.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + TABLE_ENTRY_LEN * self.chunks.len() + self.chunks.iter().map(Chunk::encoded_len).sum::<usize>()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut names = std::collections::HashSet::new();
        if let Some(c) = self.chunks.iter().find(|c| !names.insert(c.name.as_str())) {
            return Err(Error::format(0, format!("duplicate chunk `{}`", c.name)));
        }
        let bodies = self.chunks.iter().map(Chunk::encode).collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&(bodies.len() as u32).to_le_bytes());
        let mut offset = HEADER_LEN + TABLE_ENTRY_LEN * bodies.len();
        for b in &bodies {
            out.extend_from_slice(&(offset as u64).to_le_bytes());
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            offset += b.len();
        }
        for b in bodies {
            out.extend_from_slice(&b);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            base: 0,
            name: None,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, not an LFAM file"));
        }
        let version = r.u16()?;
        if version >> 8 != VERSION >> 8 {
            return Err(Error::format(
                4,
                format!("unsupported major version {} (expected {})", version >> 8, VERSION >> 8),
            ));
        }
        let flags = r.u16()?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            table.push((r.u64()? as usize, r.u64()? as usize));
        }
        let mut expected = r.pos;
        let mut chunks = Vec::with_capacity(table.len());
        for (i, (off, len)) in table.into_iter().enumerate() {
            if off != expected {
                return Err(Error::format(
                    HEADER_LEN + i * TABLE_ENTRY_LEN,
                    format!("chunk {i} starts at {off}, expected {expected}"),
                ));
            }
            let end = off.checked_add(len).filter(|e| *e <= bytes.len()).ok_or_else(|| {
                Error::format(bytes.len(), format!("chunk {i} truncated: needs bytes {off}..{}", off.saturating_add(len)))
            })?;
            chunks.push(Chunk::decode(&bytes[off..end], off)?);
            expected = end;
        }
        if expected != bytes.len() {
            return Err(Error::format(expected, format!("{} trailing bytes", bytes.len() - expected)));
        }
        Ok(Self { flags, chunks })
    }

    /// Writes through a temporary file in the target directory, then renames.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Temp file + rename, so readers never see a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Graph description stored in the [`META_CHUNK`] text chunk.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraphMeta {
    pub config: ModelConfig,
    /// Activation scale per quantized linear layer.
    pub act_scales: BTreeMap<String, f32>,
    /// Layers kept in float32 at inference.
    pub float_layers: Vec<String>,
}

impl GraphMeta {
    pub fn new(config: ModelConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn to_text(&self, model: &Model) -> String {
        let mut s = String::from("# lfam graph\n");
        s.push_str(&self.config.to_text());
        for (pos, owner) in model.share_groups() {
            s.push_str(&format!("share {pos} {owner}\n"));
        }
        for (id, scale) in &self.act_scales {
            s.push_str(&format!("act {id} {:08x}\n", scale.to_bits()));
        }
        for id in &self.float_layers {
            s.push_str(&format!("float {id}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg_lines = String::new();
        let mut act_scales = BTreeMap::new();
        let mut float_layers = Vec::new();
        let mut shares = Vec::new();
        for line in text.lines() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                None => {}
                Some(w) if w.starts_with('#') => {}
                Some("share") => shares.push((
                    parts.next().unwrap_or_default().to_string(),
                    parts.next().unwrap_or_default().to_string(),
                )),
                Some("act") => {
                    let (id, hex) = (parts.next(), parts.next());
                    let (Some(id), Some(hex)) = (id, hex) else {
                        return Err(Error::Config(format!("bad activation line `{line}`")));
                    };
                    let bits = u32::from_str_radix(hex, 16)
                        .map_err(|_| Error::Config(format!("bad activation scale `{hex}`")))?;
                    act_scales.insert(id.to_string(), QuantParams::new(f32::from_bits(bits))?.scale());
                }
                Some("float") => {
                    float_layers.push(
                        parts
                            .next()
                            .ok_or_else(|| Error::Config(format!("bad float line `{line}`")))?
                            .to_string(),
                    );
                }
                Some(_) => {
                    cfg_lines.push_str(line);
                    cfg_lines.push('\n');
                }
            }
        }
        let config = ModelConfig::from_text(&cfg_lines)?;
        let meta = Self {
            config,
            act_scales,
            float_layers,
        };
        let expected = Model::new(config, 0)?.share_groups();
        if shares != expected {
            return Err(Error::Config("share groups do not match the model shape".into()));
        }
        Ok(meta)
    }
}

/// How each parameter is stored by [`pack_model`].
#[derive(Debug, Clone, Default)]
pub struct PackPlan<'a> {
    /// Parameter name → int8 weight scale. Absent parameters stay f32.
    pub weight_scales: BTreeMap<String, QuantParams>,
    /// Mask over the prunable parameters; int8 prunable tensors become SparseI8.
    pub mask: Option<&'a SparseMask>,
}

/// Serializable form of a model. Shared parameters are stored once.
pub fn pack_model(model: &Model, meta: &GraphMeta, plan: &PackPlan) -> Result<CompressedModel> {
    if meta.config != *model.config() {
        return Err(Error::Config("graph metadata describes a different model".into()));
    }
    let prunable = model.prunable_indices();
    if let Some(mask) = plan.mask {
        if mask.keep.len() != prunable.len() {
            return Err(Error::format(0, "mask does not cover the prunable parameters"));
        }
    }
    for name in plan.weight_scales.keys() {
        if model.param_index(name).is_none() {
            return Err(Error::Config(format!("no parameter named `{name}`")));
        }
    }
    let mut chunks = vec![Chunk::text(META_CHUNK, meta.to_text(model))];
    for (i, p) in model.params().iter().enumerate() {
        let keep = plan
            .mask
            .and_then(|m| prunable.iter().position(|j| *j == i).map(|k| &m.keep[k]));
        let chunk = match (plan.weight_scales.get(&p.name), keep) {
            (Some(s), Some(keep)) => Chunk::sparse_i8(&p.name, &p.tensor, keep, *s)?,
            (Some(s), None) => Chunk::dense_i8(&p.name, &p.tensor, *s)?,
            (None, _) => Chunk::dense_f32(&p.name, p.tensor.clone()),
        };
        chunks.push(chunk);
    }
    Ok(CompressedModel { flags: 0, chunks })
}

/// Rebuilds a float model (integers dequantized) and its metadata.
pub fn unpack_model(cm: &CompressedModel) -> Result<(Model, GraphMeta)> {
    let meta_chunk = cm
        .chunk(META_CHUNK)
        .ok_or_else(|| Error::format(0, format!("missing `{META_CHUNK}` chunk")))?;
    let Payload::Text(text) = &meta_chunk.payload else {
        return Err(Error::format(0, format!("`{META_CHUNK}` is not a text chunk")));
    };
    let meta = GraphMeta::from_text(text)?;
    let mut model = Model::new(meta.config, 0)?;
    for i in 0..model.params().len() {
        let name = model.params()[i].name.clone();
        let chunk = cm
            .chunk(&name)
            .ok_or_else(|| Error::format(0, format!("missing tensor `{name}`")))?;
        model.set_param(i, chunk.to_tensor()?)?;
    }
    if cm.chunks.len() != model.params().len() + 1 {
        return Err(Error::format(0, "file holds chunks the graph does not use"));
    }
    Ok((model, meta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeEntry {
    pub name: String,
    pub encoding: Encoding,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub entries: Vec<SizeEntry>,
    /// Header and chunk table.
    pub overhead_bytes: usize,
    pub total_bytes: usize,
    /// Same graph with sharing unrolled, every tensor dense f32.
    pub baseline_bytes: usize,
    pub compression_ratio: f64,
}

impl SizeReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(6);
        s.push_str(&format!("{:<w$}  {:<9}  {:>9}\n", "tensor", "encoding", "bytes"));
        for e in &self.entries {
            s.push_str(&format!("{:<w$}  {:<9}  {:>9}\n", e.name, e.encoding.name(), e.bytes));
        }
        s.push_str(&format!("{:<w$}  {:<9}  {:>9}\n", "(header+table)", "", self.overhead_bytes));
        s.push_str(&format!("{:<w$}  {:<9}  {:>9}\n", "total", "", self.total_bytes));
        s.push_str(&format!("{:<w$}  {:<9}  {:>9}\n", "baseline", "dense-f32", self.baseline_bytes));
        s.push_str(&format!("compression ratio {:.3}x\n", self.compression_ratio));
        s
    }
}

fn dense_unrolled_len(config: &ModelConfig) -> Result<usize> {
    let twin = Model::new(config.unrolled(), 0)?;
    let meta = GraphMeta::new(*twin.config()).to_text(&twin);
    let mut total = HEADER_LEN + TABLE_ENTRY_LEN * (twin.params().len() + 1);
    total += chunk_len(META_CHUNK.len(), 0, Encoding::Text, meta.len(), meta.len());
    for p in twin.params() {
        let n = p.tensor.len();
        total += chunk_len(p.name.len(), p.tensor.shape().len(), Encoding::DenseF32, n, n);
    }
    Ok(total)
}

pub fn model_size_report(cm: &CompressedModel) -> Result<SizeReport> {
    let entries: Vec<SizeEntry> = cm
        .chunks
        .iter()
        .map(|c| SizeEntry {
            name: c.name.clone(),
            encoding: c.encoding(),
            bytes: c.encoded_len(),
        })
        .collect();
    let overhead_bytes = HEADER_LEN + TABLE_ENTRY_LEN * cm.chunks.len();
    let total_bytes = overhead_bytes + entries.iter().map(|e| e.bytes).sum::<usize>();
    let meta = match cm.chunk(META_CHUNK).map(|c| &c.payload) {
        Some(Payload::Text(t)) => GraphMeta::from_text(t)?,
        _ => return Err(Error::format(0, format!("missing `{META_CHUNK}` chunk"))),
    };
    let baseline_bytes = dense_unrolled_len(&meta.config)?;
    Ok(SizeReport {
        entries,
        overhead_bytes,
        total_bytes,
        baseline_bytes,
        compression_ratio: baseline_bytes as f64 / total_bytes as f64,
    })
}
