use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, LnCache, Mat};
use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::Tensor;

/// Shape of the weight-shared encoder-decoder.
///
/// `enc_blocks` blocks each own one encoder sub-layer that is applied
/// `enc_share` times; likewise for the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub enc_share: usize,
    pub dec_share: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_blocks: 2,
            dec_blocks: 1,
            enc_share: 2,
            dec_share: 1,
            d_model: 32,
            d_ff: 64,
            vocab: 12,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("m", self.enc_blocks),
            ("n", self.dec_blocks),
            ("s1", self.enc_share),
            ("s2", self.dec_share),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("model field `{name}` must be positive")));
            }
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocab needs at least a start symbol and one token".into()));
        }
        Ok(())
    }

    /// Same network with every shared application given its own parameters.
    pub fn unrolled(&self) -> Self {
        Self {
            enc_blocks: self.enc_blocks * self.enc_share,
            dec_blocks: self.dec_blocks * self.dec_share,
            enc_share: 1,
            dec_share: 1,
            ..*self
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "m={}\nn={}\ns1={}\ns2={}\nd_model={}\nd_ff={}\nvocab={}\n",
            self.enc_blocks, self.dec_blocks, self.enc_share, self.dec_share, self.d_model, self.d_ff, self.vocab
        )
    }

    /// Applies one `key=value` setting. Unknown keys are reported as `Ok(false)`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("`{key}` expects an integer, got `{v}`")))
        };
        match key {
            "m" => self.enc_blocks = parse(value)?,
            "n" => self.dec_blocks = parse(value)?,
            "s1" => self.enc_share = parse(value)?,
            "s2" => self.dec_share = parse(value)?,
            "d_model" => self.d_model = parse(value)?,
            "d_ff" => self.d_ff = parse(value)?,
            "vocab" => self.vocab = parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormGain,
    NormBias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub role: ParamRole,
    pub prunable: bool,
}

/// A weight-bearing linear map, the unit of quantization and mixed precision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearInfo {
    pub id: String,
    pub weight: usize,
    pub bias: Option<usize>,
    pub prunable: bool,
    /// Kept in float32 regardless of strategy (the output projection).
    pub excluded: bool,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: Option<usize>,
    layer: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ln {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Debug, Clone, Copy)]
struct EncSub {
    ln1: Ln,
    attn: Attn,
    ln2: Ln,
    ff1: Lin,
    ff2: Lin,
}

#[derive(Debug, Clone, Copy)]
struct DecSub {
    ln1: Ln,
    self_attn: Attn,
    ln2: Ln,
    cross: Attn,
    ln3: Ln,
    ff1: Lin,
    ff2: Lin,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: Lin,
    enc: Vec<EncSub>,
    enc_ln: Ln,
    emb: Lin,
    dec: Vec<DecSub>,
    dec_ln: Ln,
    predict: Lin,
}

struct Builder {
    params: Vec<Param>,
    layers: Vec<LinearInfo>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, role: ParamRole, prunable: bool, std: f32) -> usize {
        let n: usize = shape.iter().product();
        let data = match role {
            ParamRole::Weight => {
                let d = Normal::new(0.0f32, std).expect("positive std");
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
            ParamRole::NormGain => vec![1.0; n],
            ParamRole::Bias | ParamRole::NormBias => vec![0.0; n],
        };
        self.params.push(Param {
            name,
            tensor: Tensor::new(shape, data).expect("initial parameters are finite"),
            role,
            prunable,
        });
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn linear(&mut self, id: &str, in_dim: usize, out_dim: usize, bias: bool, prunable: bool, excluded: bool, std: f32) -> Lin {
        let w = self.push(format!("{id}.w"), vec![in_dim, out_dim], ParamRole::Weight, prunable, std);
        let b = bias.then(|| self.push(format!("{id}.b"), vec![out_dim], ParamRole::Bias, false, 0.0));
        self.layers.push(LinearInfo {
            id: id.to_string(),
            weight: w,
            bias: b,
            prunable,
            excluded,
        });
        Lin {
            w,
            b,
            layer: self.layers.len() - 1,
        }
    }

    fn std_linear(&mut self, id: &str, in_dim: usize, out_dim: usize) -> Lin {
        self.linear(id, in_dim, out_dim, true, true, false, 1.0 / (in_dim as f32).sqrt())
    }

    fn norm(&mut self, id: &str, d: usize) -> Ln {
        Ln {
            g: self.push(format!("{id}.g"), vec![d], ParamRole::NormGain, false, 0.0),
            b: self.push(format!("{id}.b"), vec![d], ParamRole::NormBias, false, 0.0),
        }
    }

    fn attn(&mut self, id: &str, d: usize) -> Attn {
        Attn {
            q: self.std_linear(&format!("{id}.q"), d, d),
            k: self.std_linear(&format!("{id}.k"), d, d),
            v: self.std_linear(&format!("{id}.v"), d, d),
            o: self.std_linear(&format!("{id}.o"), d, d),
        }
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> (Vec<Param>, Vec<LinearInfo>, Layout) {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab);
    let mut b = Builder {
        params: Vec::new(),
        layers: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    // One-hot inputs: unit-variance rows.
    let stem = b.linear("stem", v, d, true, true, false, 1.0);
    let enc = (0..cfg.enc_blocks)
        .map(|m| {
            let p = format!("enc{m}");
            EncSub {
                ln1: b.norm(&format!("{p}.ln1"), d),
                attn: b.attn(&format!("{p}.attn"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                ff1: b.std_linear(&format!("{p}.ff1"), d, f),
                ff2: b.std_linear(&format!("{p}.ff2"), f, d),
            }
        })
        .collect();
    let enc_ln = b.norm("enc.ln", d);
    let emb = b.linear("dec.emb", v, d, false, false, false, 1.0);
    let dec = (0..cfg.dec_blocks)
        .map(|n| {
            let p = format!("dec{n}");
            DecSub {
                ln1: b.norm(&format!("{p}.ln1"), d),
                self_attn: b.attn(&format!("{p}.self"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                cross: b.attn(&format!("{p}.cross"), d),
                ln3: b.norm(&format!("{p}.ln3"), d),
                ff1: b.std_linear(&format!("{p}.ff1"), d, f),
                ff2: b.std_linear(&format!("{p}.ff2"), f, d),
            }
        })
        .collect();
    let dec_ln = b.norm("dec.ln", d);
    let predict = b.linear("predict", d, v, true, false, true, 1.0 / (d as f32).sqrt());
    (
        b.params,
        b.layers,
        Layout {
            stem,
            enc,
            enc_ln,
            emb,
            dec,
            dec_ln,
            predict,
        },
    )
}

/// One source/target pair. Index 0 of the vocabulary is the decoder start symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    /// Decoder input: start symbol followed by the target shifted right.
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
}

impl Example {
    pub fn new(src: Vec<usize>, tgt: Vec<usize>) -> Self {
        let mut tgt_in = Vec::with_capacity(tgt.len());
        tgt_in.push(0);
        tgt_in.extend_from_slice(&tgt[..tgt.len().saturating_sub(1)]);
        Self {
            src,
            tgt_in,
            tgt_out: tgt,
        }
    }
}

/// Per-layer activation quantization and capture hooks for a forward pass.
#[derive(Debug, Default)]
pub struct ForwardHooks<'a> {
    /// Indexed by linear-layer ordinal; `Some` fake-quantizes that layer's input.
    pub act_quant: Option<&'a [Option<QuantParams>]>,
    /// Indexed by linear-layer ordinal; receives every input row the layer sees, as f32.
    pub capture: Option<&'a mut Vec<Vec<f32>>>,
}

#[derive(Debug, Clone)]
struct LinTape {
    x_in: Mat,
}

#[derive(Debug, Clone)]
struct AttnTape {
    q_in: LinTape,
    k_in: LinTape,
    v_in: LinTape,
    o_in: LinTape,
    q: Mat,
    k: Mat,
    v: Mat,
    p: Mat,
}

#[derive(Debug, Clone)]
struct EncTape {
    block: usize,
    ln1: LnCache,
    attn: AttnTape,
    ln2: LnCache,
    ff1: LinTape,
    ff1_pre: Mat,
    ff2: LinTape,
}

#[derive(Debug, Clone)]
struct DecTape {
    block: usize,
    ln1: LnCache,
    self_attn: AttnTape,
    ln2: LnCache,
    cross: AttnTape,
    ln3: LnCache,
    ff1: LinTape,
    ff1_pre: Mat,
    ff2: LinTape,
}

#[derive(Debug, Clone)]
struct Tape {
    stem: LinTape,
    stem_pre: Mat,
    enc: Vec<EncTape>,
    enc_ln: LnCache,
    z: Mat,
    emb_tokens: Vec<usize>,
    emb_scale: f64,
    dec: Vec<DecTape>,
    dec_ln: LnCache,
    predict: LinTape,
    logits: Mat,
}

/// Result of one backward pass: loss and gradients aligned with [`Model::params`].
#[derive(Debug, Clone)]
pub struct TrainStep {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

/// The weight-shared encoder-decoder together with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    layers: Vec<LinearInfo>,
    layout: Layout,
}

/// f64 view of every parameter, built once per pass.
struct Weights(Vec<Mat>);

impl Weights {
    fn of(params: &[Param]) -> Self {
        Weights(
            params
                .iter()
                .map(|p| match p.tensor.shape() {
                    [r, c] => Mat::from_f32(*r, *c, p.tensor.data()),
                    _ => Mat::from_f32(1, p.tensor.len(), p.tensor.data()),
                })
                .collect(),
        )
    }

    fn vec(&self, i: usize) -> &[f64] {
        &self.0[i].data
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layers, layout) = build(&config, seed);
        Ok(Self {
            config,
            params,
            layers,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Replaces a parameter tensor; the shape must not change.
    pub fn set_param(&mut self, index: usize, tensor: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(index)
            .ok_or_else(|| Error::dim(format!("no parameter #{index}")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::dim(format!(
                "{}: shape {:?} does not match {:?}",
                p.name,
                tensor.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub(crate) fn param_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].tensor
    }

    /// Linear layers in network order.
    pub fn linear_layers(&self) -> &[LinearInfo] {
        &self.layers
    }

    /// Number of stored (unique) parameters.
    pub fn unique_param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn prunable_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|i| self.params[*i].prunable).collect()
    }

    pub fn prunable_count(&self) -> usize {
        self.prunable_indices().iter().map(|i| self.params[*i].tensor.len()).sum()
    }

    /// Applied sub-layer position → owning parameter set, e.g. `enc.3 -> enc1`.
    pub fn share_groups(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut pos = 0;
        for m in 0..self.config.enc_blocks {
            for _ in 0..self.config.enc_share {
                out.push((format!("enc.{pos}"), format!("enc{m}")));
                pos += 1;
            }
        }
        pos = 0;
        for n in 0..self.config.dec_blocks {
            for _ in 0..self.config.dec_share {
                out.push((format!("dec.{pos}"), format!("dec{n}")));
                pos += 1;
            }
        }
        out
    }

    /// Name of the parameter that plays `name`'s role in the unrolled twin,
    /// for application `app` (0-based) of its block.
    fn unrolled_name(&self, name: &str, app: usize) -> String {
        for (prefix, share) in [("enc", self.config.enc_share), ("dec", self.config.dec_share)] {
            if let Some(rest) = name.strip_prefix(prefix) {
                let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
                if let Ok(block) = digits.parse::<usize>() {
                    return format!("{prefix}{}{}", block * share + app, &rest[digits.len()..]);
                }
            }
        }
        name.to_string()
    }

    /// Equivalent model where each shared application owns a copy of its weights.
    pub fn unroll(&self) -> Model {
        let cfg = self.config.unrolled();
        let (mut params, layers, layout) = build(&cfg, 0);
        for p in &self.params {
            let share = if p.name.starts_with("enc") && p.name.as_bytes().get(3).is_some_and(u8::is_ascii_digit) {
                self.config.enc_share
            } else if p.name.starts_with("dec") && p.name.as_bytes().get(3).is_some_and(u8::is_ascii_digit) {
                self.config.dec_share
            } else {
                1
            };
            for app in 0..share {
                let target = self.unrolled_name(&p.name, app);
                let slot = params
                    .iter_mut()
                    .find(|q| q.name == target)
                    .expect("unrolled twin has every parameter");
                slot.tensor = p.tensor.clone();
            }
        }
        Model {
            config: cfg,
            params,
            layers,
            layout,
        }
    }

    /// Which unrolled-twin parameters hold copies of shared parameter `index`.
    pub fn unrolled_copies(&self, index: usize) -> Vec<String> {
        let name = &self.params[index].name;
        let share = if name.starts_with("enc") && name.as_bytes().get(3).is_some_and(u8::is_ascii_digit) {
            self.config.enc_share
        } else if name.starts_with("dec") && name.as_bytes().get(3).is_some_and(u8::is_ascii_digit) {
            self.config.dec_share
        } else {
            1
        };
        (0..share).map(|a| self.unrolled_name(name, a)).collect()
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        let v = self.config.vocab;
        if ex.src.is_empty() || ex.tgt_in.is_empty() {
            return Err(Error::dim("empty source or target sequence"));
        }
        if ex.tgt_in.len() != ex.tgt_out.len() {
            return Err(Error::dim("decoder input and target lengths differ"));
        }
        if let Some(t) = ex.src.iter().chain(&ex.tgt_in).chain(&ex.tgt_out).find(|t| **t >= v) {
            return Err(Error::Value(format!("symbol {t} outside vocabulary of {v}")));
        }
        Ok(())
    }

    fn one_hot(&self, tokens: &[usize]) -> Mat {
        let v = self.config.vocab;
        let mut m = Mat::zeros(tokens.len(), v);
        for (r, t) in tokens.iter().enumerate() {
            m.data[r * v + t] = 1.0;
        }
        m
    }

    fn linear(&self, w: &Weights, lin: Lin, x: &Mat, hooks: &mut ForwardHooks) -> (Mat, LinTape) {
        if let Some(cap) = hooks.capture.as_deref_mut() {
            cap[lin.layer].extend(x.data.iter().map(|v| *v as f32));
        }
        let x_in = match hooks.act_quant.and_then(|q| q[lin.layer]) {
            Some(q) => Mat {
                rows: x.rows,
                cols: x.cols,
                data: x.data.iter().map(|v| q.fake_quant_value(*v as f32) as f64).collect(),
            },
            None => x.clone(),
        };
        let mut y = ops::matmul(&x_in, &w.0[lin.w]);
        if let Some(b) = lin.b {
            ops::add_bias(&mut y, w.vec(b));
        }
        (y, LinTape { x_in })
    }

    fn attention(
        &self,
        w: &Weights,
        a: &Attn,
        xq: &Mat,
        xkv: &Mat,
        causal: bool,
        hooks: &mut ForwardHooks,
    ) -> (Mat, AttnTape) {
        let (q, q_in) = self.linear(w, a.q, xq, hooks);
        let (k, k_in) = self.linear(w, a.k, xkv, hooks);
        let (v, v_in) = self.linear(w, a.v, xkv, hooks);
        let scale = 1.0 / (self.config.d_model as f64).sqrt();
        let mut s = ops::matmul_nt(&q, &k);
        s.data.iter_mut().for_each(|x| *x *= scale);
        let p = ops::softmax_rows(&s, causal);
        let c = ops::matmul(&p, &v);
        let (out, o_in) = self.linear(w, a.o, &c, hooks);
        (
            out,
            AttnTape {
                q_in,
                k_in,
                v_in,
                o_in,
                q,
                k,
                v,
                p,
            },
        )
    }

    fn norm(&self, w: &Weights, ln: Ln, x: &Mat) -> (Mat, LnCache) {
        ops::layer_norm(x, w.vec(ln.g), w.vec(ln.b))
    }

    fn ffn(&self, w: &Weights, ff1: Lin, ff2: Lin, x: &Mat, hooks: &mut ForwardHooks) -> (Mat, LinTape, Mat, LinTape) {
        let (pre, t1) = self.linear(w, ff1, x, hooks);
        let hidden = ops::relu(&pre);
        let (out, t2) = self.linear(w, ff2, &hidden, hooks);
        (out, t1, pre, t2)
    }

    fn run(&self, ex: &Example, hooks: &mut ForwardHooks) -> Result<Tape> {
        self.check_example(ex)?;
        let w = Weights::of(&self.params);
        let d = self.config.d_model;
        let l = &self.layout;

        let src = self.one_hot(&ex.src);
        let (stem_pre, stem) = self.linear(&w, l.stem, &src, hooks);
        let mut x = ops::relu(&stem_pre);
        x.add_assign(&ops::positional_encoding(ex.src.len(), d));

        let mut enc = Vec::new();
        for (block, sub) in l.enc.iter().enumerate() {
            for _ in 0..self.config.enc_share {
                let (h, ln1) = self.norm(&w, sub.ln1, &x);
                let (a, attn) = self.attention(&w, &sub.attn, &h, &h, false, hooks);
                let h1 = x.add(&a);
                let (h2, ln2) = self.norm(&w, sub.ln2, &h1);
                let (f, ff1, ff1_pre, ff2) = self.ffn(&w, sub.ff1, sub.ff2, &h2, hooks);
                x = h1.add(&f);
                enc.push(EncTape {
                    block,
                    ln1,
                    attn,
                    ln2,
                    ff1,
                    ff1_pre,
                    ff2,
                });
            }
        }
        let (z, enc_ln) = self.norm(&w, l.enc_ln, &x);

        // Embedding lookup is a linear map on one-hot rows; one-hot inputs are
        // captured as such, and fake-quantizing them scales the looked-up row.
        if let Some(cap) = hooks.capture.as_deref_mut() {
            let oh = self.one_hot(&ex.tgt_in);
            cap[l.emb.layer].extend(oh.data.iter().map(|v| *v as f32));
        }
        let emb_scale = match hooks.act_quant.and_then(|q| q[l.emb.layer]) {
            Some(q) => q.fake_quant_value(1.0) as f64,
            None => 1.0,
        };
        let table = &w.0[l.emb.w];
        let mut y = Mat::zeros(ex.tgt_in.len(), d);
        for (r, t) in ex.tgt_in.iter().enumerate() {
            for (o, e) in y.row_mut(r).iter_mut().zip(table.row(*t)) {
                *o = emb_scale * e;
            }
        }
        y.add_assign(&ops::positional_encoding(ex.tgt_in.len(), d));

        let mut dec = Vec::new();
        for (block, sub) in l.dec.iter().enumerate() {
            for _ in 0..self.config.dec_share {
                let (h, ln1) = self.norm(&w, sub.ln1, &y);
                let (a, self_attn) = self.attention(&w, &sub.self_attn, &h, &h, true, hooks);
                let h1 = y.add(&a);
                let (h2, ln2) = self.norm(&w, sub.ln2, &h1);
                let (c, cross) = self.attention(&w, &sub.cross, &h2, &z, false, hooks);
                let h3 = h1.add(&c);
                let (h4, ln3) = self.norm(&w, sub.ln3, &h3);
                let (f, ff1, ff1_pre, ff2) = self.ffn(&w, sub.ff1, sub.ff2, &h4, hooks);
                y = h3.add(&f);
                dec.push(DecTape {
                    block,
                    ln1,
                    self_attn,
                    ln2,
                    cross,
                    ln3,
                    ff1,
                    ff1_pre,
                    ff2,
                });
            }
        }
        let (out, dec_ln) = self.norm(&w, l.dec_ln, &y);
        let (logits, predict) = self.linear(&w, l.predict, &out, hooks);
        if logits.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training("non-finite logits".into()));
        }
        Ok(Tape {
            stem,
            stem_pre,
            enc,
            enc_ln,
            z,
            emb_tokens: ex.tgt_in.clone(),
            emb_scale,
            dec,
            dec_ln,
            predict,
            logits,
        })
    }

    /// Float forward pass; logits are `[target_len, vocab]`.
    pub fn forward(&self, ex: &Example) -> Result<Tensor> {
        self.forward_with(ex, &mut ForwardHooks::default())
    }

    pub fn forward_with(&self, ex: &Example, hooks: &mut ForwardHooks) -> Result<Tensor> {
        let tape = self.run(ex, hooks)?;
        Tensor::new(vec![tape.logits.rows, tape.logits.cols], tape.logits.to_f32())
    }

    pub(crate) fn logits_f64(&self, ex: &Example, hooks: &mut ForwardHooks) -> Result<Vec<f64>> {
        Ok(self.run(ex, hooks)?.logits.data)
    }

    fn lin_bwd(&self, w: &Weights, lin: Lin, tape: &LinTape, dy: &Mat, g: &mut [Mat]) -> Mat {
        g[lin.w].add_assign(&ops::matmul_tn(&tape.x_in, dy));
        if let Some(b) = lin.b {
            for (gb, v) in g[b].data.iter_mut().zip(ops::col_sum(dy)) {
                *gb += v;
            }
        }
        ops::matmul_nt(dy, &w.0[lin.w])
    }

    fn norm_bwd(&self, w: &Weights, ln: Ln, cache: &LnCache, dy: &Mat, g: &mut [Mat]) -> Mat {
        let (dx, dg, db) = ops::layer_norm_bwd(cache, w.vec(ln.g), dy);
        g[ln.g].data.iter_mut().zip(dg).for_each(|(a, b)| *a += b);
        g[ln.b].data.iter_mut().zip(db).for_each(|(a, b)| *a += b);
        dx
    }

    /// Returns `(d query input, d key/value input)`.
    fn attn_bwd(&self, w: &Weights, a: &Attn, t: &AttnTape, dout: &Mat, g: &mut [Mat]) -> (Mat, Mat) {
        let scale = 1.0 / (self.config.d_model as f64).sqrt();
        let dc = self.lin_bwd(w, a.o, &t.o_in, dout, g);
        let dp = ops::matmul_nt(&dc, &t.v);
        let dv = ops::matmul_tn(&t.p, &dc);
        let mut ds = ops::softmax_rows_bwd(&t.p, &dp);
        ds.data.iter_mut().for_each(|x| *x *= scale);
        let dq = ops::matmul(&ds, &t.k);
        let dk = ops::matmul_tn(&ds, &t.q);
        let dxq = self.lin_bwd(w, a.q, &t.q_in, &dq, g);
        let mut dxkv = self.lin_bwd(w, a.k, &t.k_in, &dk, g);
        dxkv.add_assign(&self.lin_bwd(w, a.v, &t.v_in, &dv, g));
        (dxq, dxkv)
    }

    fn ffn_bwd(&self, w: &Weights, ff1: Lin, ff2: Lin, t1: &LinTape, pre: &Mat, t2: &LinTape, dy: &Mat, g: &mut [Mat]) -> Mat {
        let dh = self.lin_bwd(w, ff2, t2, dy, g);
        let dpre = ops::relu_bwd(pre, &dh);
        self.lin_bwd(w, ff1, t1, &dpre, g)
    }

    /// Backpropagates `dlogits` through a recorded tape, accumulating into `g`.
    fn backprop(&self, w: &Weights, tape: &Tape, dlogits: &Mat, g: &mut [Mat]) {
        let l = &self.layout;
        let dout = self.lin_bwd(w, l.predict, &tape.predict, dlogits, g);
        let mut dy = self.norm_bwd(w, l.dec_ln, &tape.dec_ln, &dout, g);
        let mut dz = Mat::zeros(tape.z.rows, tape.z.cols);

        for t in tape.dec.iter().rev() {
            let sub = &l.dec[t.block];
            // y = h3 + ffn(ln3(h3))
            let dh4 = self.ffn_bwd(w, sub.ff1, sub.ff2, &t.ff1, &t.ff1_pre, &t.ff2, &dy, g);
            let mut dh3 = dy;
            dh3.add_assign(&self.norm_bwd(w, sub.ln3, &t.ln3, &dh4, g));
            // h3 = h1 + cross(ln2(h1), z)
            let (dq, dkv) = self.attn_bwd(w, &sub.cross, &t.cross, &dh3, g);
            dz.add_assign(&dkv);
            let mut dh1 = dh3;
            dh1.add_assign(&self.norm_bwd(w, sub.ln2, &t.ln2, &dq, g));
            // h1 = y + self(ln1(y))
            let (dq, dkv) = self.attn_bwd(w, &sub.self_attn, &t.self_attn, &dh1, g);
            let dh = dq.add(&dkv);
            let mut dprev = dh1;
            dprev.add_assign(&self.norm_bwd(w, sub.ln1, &t.ln1, &dh, g));
            dy = dprev;
        }

        let demb = &mut g[l.emb.w];
        for (r, tok) in tape.emb_tokens.iter().enumerate() {
            let d = demb.cols;
            for c in 0..d {
                demb.data[tok * d + c] += tape.emb_scale * dy.data[r * d + c];
            }
        }

        let mut dx = self.norm_bwd(w, l.enc_ln, &tape.enc_ln, &dz, g);
        for t in tape.enc.iter().rev() {
            let sub = &l.enc[t.block];
            let dh2 = self.ffn_bwd(w, sub.ff1, sub.ff2, &t.ff1, &t.ff1_pre, &t.ff2, &dx, g);
            let mut dh1 = dx;
            dh1.add_assign(&self.norm_bwd(w, sub.ln2, &t.ln2, &dh2, g));
            let (dq, dkv) = self.attn_bwd(w, &sub.attn, &t.attn, &dh1, g);
            let dh = dq.add(&dkv);
            let mut dprev = dh1;
            dprev.add_assign(&self.norm_bwd(w, sub.ln1, &t.ln1, &dh, g));
            dx = dprev;
        }
        let dpre = ops::relu_bwd(&tape.stem_pre, &dx);
        self.lin_bwd(w, l.stem, &tape.stem, &dpre, g);
    }

    fn zero_grads(&self) -> Vec<Mat> {
        self.params
            .iter()
            .map(|p| match p.tensor.shape() {
                [r, c] => Mat::zeros(*r, *c),
                _ => Mat::zeros(1, p.tensor.len()),
            })
            .collect()
    }

    /// Cross-entropy against per-position target distributions, summed over
    /// the batch and divided by `norm`. Gradients are f64, aligned with params.
    pub(crate) fn loss_and_grads_soft(&self, batch: &[(Example, Vec<Vec<f64>>)], norm: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        let w = Weights::of(&self.params);
        let mut g = self.zero_grads();
        let mut loss = 0.0;
        let v = self.config.vocab;
        for (ex, target) in batch {
            let tape = self.run(ex, &mut ForwardHooks::default())?;
            if target.len() != tape.logits.rows || target.iter().any(|t| t.len() != v) {
                return Err(Error::dim("target distribution does not match logits"));
            }
            let mut dlogits = Mat::zeros(tape.logits.rows, v);
            for (r, t) in target.iter().enumerate() {
                let row = tape.logits.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                for c in 0..v {
                    let logp = row[c] - lse;
                    if t[c] > 0.0 {
                        loss -= t[c] * logp;
                    }
                    dlogits.data[r * v + c] = (logp.exp() - t[c]) / norm;
                }
            }
            self.backprop(&w, &tape, &dlogits, &mut g);
        }
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss became {loss}")));
        }
        Ok((loss / norm, g.into_iter().map(|m| m.data).collect()))
    }

    pub(crate) fn loss_and_grads(&self, batch: &[Example]) -> Result<(f64, Vec<Vec<f64>>)> {
        let v = self.config.vocab;
        let tokens: usize = batch.iter().map(|e| e.tgt_out.len()).sum();
        let mut targets = Vec::with_capacity(batch.len());
        for ex in batch {
            if let Some(t) = ex.tgt_out.iter().find(|t| **t >= v) {
                return Err(Error::Value(format!("target symbol {t} outside vocabulary of {v}")));
            }
            let dist = ex
                .tgt_out
                .iter()
                .map(|t| {
                    let mut row = vec![0.0; v];
                    row[*t] = 1.0;
                    row
                })
                .collect();
            targets.push((ex.clone(), dist));
        }
        self.loss_and_grads_soft(&targets, tokens.max(1) as f64)
    }

    /// Mean token cross-entropy over the batch and its exact gradients.
    /// Shared parameters receive the sum over all their applications.
    pub fn backward(&self, batch: &[Example]) -> Result<TrainStep> {
        let (loss, grads) = self.loss_and_grads(batch)?;
        self.to_train_step(loss, grads)
    }

    /// Like [`Model::backward`] with arbitrary per-position target distributions.
    pub fn backward_soft(&self, ex: &Example, target: &[Vec<f64>]) -> Result<TrainStep> {
        let (loss, grads) = self.loss_and_grads_soft(&[(ex.clone(), target.to_vec())], target.len().max(1) as f64)?;
        self.to_train_step(loss, grads)
    }

    fn to_train_step(&self, loss: f64, grads: Vec<Vec<f64>>) -> Result<TrainStep> {
        let grads = grads
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| Tensor::new(p.tensor.shape().to_vec(), g.iter().map(|v| *v as f32).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainStep { loss, grads })
    }

    /// Mean token cross-entropy without gradients, in f64.
    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0usize;
        let v = self.config.vocab;
        for ex in batch {
            let logits = self.logits_f64(ex, &mut ForwardHooks::default())?;
            for (r, t) in ex.tgt_out.iter().enumerate() {
                let row = &logits[r * v..(r + 1) * v];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total -= row[*t] - lse;
                tokens += 1;
            }
        }
        Ok(total / tokens.max(1) as f64)
    }

    /// Softmax of the float logits, per position.
    pub fn predict_distribution(&self, ex: &Example) -> Result<Vec<Vec<f64>>> {
        let v = self.config.vocab;
        let logits = self.logits_f64(ex, &mut ForwardHooks::default())?;
        Ok(logits
            .chunks(v)
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect()
            })
            .collect())
    }
}
