use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::capture::{capture_calibration, CalibCapture};
use super::config::{PipelineConfig, QuantStrategy};
use super::report::{EvalSummary, PipelineReport};
use crate::admm::{maxabs_scale, optimize_weight_scale};
use crate::amp::{layer_cost, select_fallback, LayerCost, LinearLayer, Precision, PrecisionPlan};
use crate::calib::calibrate;
use crate::error::{Error, Result};
use crate::format::{model_size_report, pack_model, unpack_model, write_atomic, CompressedModel, GraphMeta, PackPlan};
use crate::model::{accuracy_with, generate, train, Example, ForwardHooks, Model};
use crate::quant::QuantParams;
use crate::sparsify::SparseMask;
use crate::tensor::Tensor;

/// Stage names in execution order.
pub const STAGES: [&str; 9] = [
    "pretrain",
    "sparse-train",
    "capture",
    "calibrate",
    "quantize",
    "amp",
    "pack",
    "evaluate",
    "report",
];

/// Artifact locations inside the work directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn pretrained(&self) -> PathBuf {
        self.dir.join("pretrained.lfam")
    }

    pub fn sparse(&self) -> PathBuf {
        self.dir.join("sparse.lfam")
    }

    pub fn mask(&self) -> PathBuf {
        self.dir.join("mask.lfam")
    }

    pub fn capture(&self) -> PathBuf {
        self.dir.join("capture")
    }

    pub fn act_scales(&self) -> PathBuf {
        self.dir.join("act_scales.txt")
    }

    pub fn weight_scales(&self) -> PathBuf {
        self.dir.join("weight_scales.txt")
    }

    pub fn plan(&self) -> PathBuf {
        self.dir.join("plan.txt")
    }

    pub fn model(&self) -> PathBuf {
        self.dir.join("model.lfam")
    }

    pub fn eval(&self) -> PathBuf {
        self.dir.join("eval.txt")
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.txt")
    }

    pub fn stage_log(&self) -> PathBuf {
        self.dir.join("stages.log")
    }

    /// Files and directories a stage produces.
    pub fn outputs(&self, stage: &str) -> Vec<PathBuf> {
        match stage {
            "pretrain" => vec![self.pretrained()],
            "sparse-train" => vec![self.sparse(), self.mask()],
            "capture" => vec![self.capture()],
            "calibrate" => vec![self.act_scales()],
            "quantize" => vec![self.weight_scales()],
            "amp" => vec![self.plan()],
            "pack" => vec![self.model()],
            "evaluate" => vec![self.eval()],
            "report" => vec![self.report()],
            _ => Vec::new(),
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn save_model(model: &Model, path: &Path) -> Result<()> {
    let cm = pack_model(model, &GraphMeta::new(*model.config()), &PackPlan::default())?;
    cm.write(path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    Ok(unpack_model(&CompressedModel::read(path)?)?.0)
}

fn save_mask(model: &Model, mask: &SparseMask, path: &Path) -> Result<()> {
    let shapes: Vec<Vec<usize>> = model
        .prunable_indices()
        .iter()
        .map(|i| model.params()[*i].tensor.shape().to_vec())
        .collect();
    let chunks = model
        .prunable_indices()
        .iter()
        .zip(mask.to_tensors(&shapes)?)
        .map(|(i, t)| crate::format::Chunk::dense_f32(&model.params()[*i].name, t))
        .collect();
    CompressedModel { flags: 0, chunks }.write(path)
}

fn load_mask(model: &Model, path: &Path) -> Result<SparseMask> {
    let cm = CompressedModel::read(path)?;
    let tensors = model
        .prunable_indices()
        .iter()
        .map(|i| {
            let name = &model.params()[*i].name;
            cm.chunk(name)
                .ok_or_else(|| Error::format(0, format!("mask file lacks `{name}`")))?
                .to_tensor()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SparseMask::from_tensors(&tensors))
}

/// `layer_id hex-bits` lines; the decimal value follows as a comment.
pub fn scales_to_text(scales: &BTreeMap<String, f32>) -> String {
    let mut s = String::new();
    for (id, v) in scales {
        s.push_str(&format!("{id} {:08x} # {v:e}\n", v.to_bits()));
    }
    s
}

pub fn scales_from_text(text: &str) -> Result<BTreeMap<String, f32>> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (id, hex) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::Config(format!("bad scale line `{line}`")))?;
        let bits = u32::from_str_radix(hex.trim(), 16).map_err(|_| Error::Config(format!("bad scale `{hex}`")))?;
        out.insert(id.to_string(), QuantParams::new(f32::from_bits(bits))?.scale());
    }
    Ok(out)
}

fn train_set(cfg: &PipelineConfig) -> Result<Vec<Example>> {
    generate(cfg.task, cfg.train_examples, cfg.seq_len, cfg.model.vocab, cfg.data_seed(1))
}

pub fn eval_set(cfg: &PipelineConfig) -> Result<Vec<Example>> {
    generate(cfg.task, cfg.eval_examples, cfg.seq_len, cfg.model.vocab, cfg.data_seed(2))
}

pub fn calib_batches(cfg: &PipelineConfig) -> Result<Vec<Vec<Example>>> {
    let all = generate(
        cfg.task,
        cfg.calib_batches * cfg.calib_batch_size,
        cfg.seq_len,
        cfg.model.vocab,
        cfg.data_seed(3),
    )?;
    Ok(all.chunks(cfg.calib_batch_size).map(<[Example]>::to_vec).collect())
}

fn quantized_layers<'a>(cfg: &PipelineConfig, model: &'a Model) -> Vec<&'a crate::model::LinearInfo> {
    model
        .linear_layers()
        .iter()
        .filter(|l| !l.excluded && !cfg.exclude.contains(&l.id))
        .collect()
}

fn check_exclusions(cfg: &PipelineConfig, model: &Model) -> Result<()> {
    for id in &cfg.exclude {
        if !model.linear_layers().iter().any(|l| &l.id == id) {
            return Err(Error::Config(format!("excluded layer `{id}` does not exist")));
        }
    }
    Ok(())
}

/// Layers kept in float32 regardless of strategy: the configured list plus
/// layers the model itself marks as excluded.
fn all_excluded(cfg: &PipelineConfig, model: &Model) -> Vec<String> {
    let mut ex: Vec<String> = model
        .linear_layers()
        .iter()
        .filter(|l| l.excluded || cfg.exclude.contains(&l.id))
        .map(|l| l.id.clone())
        .collect();
    ex.sort();
    ex
}

pub fn stage_pretrain(cfg: &PipelineConfig, art: &Artifacts) -> Result<()> {
    ensure_dir(&art.dir)?;
    let mut model = Model::new(cfg.model, cfg.seed)?;
    check_exclusions(cfg, &model)?;
    train(&mut model, &train_set(cfg)?, &cfg.pretrain_config(), None)?;
    save_model(&model, &art.pretrained())
}

pub fn stage_sparse_train(cfg: &PipelineConfig, art: &Artifacts) -> Result<()> {
    let mut model = load_model(&art.pretrained())?;
    let mask = if cfg.sparsity > 0.0 {
        train(&mut model, &train_set(cfg)?, &cfg.finetune_config(), Some(cfg.schedule()?))?.mask
    } else {
        let shapes: Vec<Vec<usize>> = model
            .prunable_indices()
            .iter()
            .map(|i| model.params()[*i].tensor.shape().to_vec())
            .collect();
        SparseMask::all_keep(&shapes)
    };
    save_model(&model, &art.sparse())?;
    save_mask(&model, &mask, &art.mask())
}

pub fn stage_capture(cfg: &PipelineConfig, art: &Artifacts) -> Result<CalibCapture> {
    let model = load_model(&art.sparse())?;
    let dir = art.capture();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    capture_calibration(&model, &calib_batches(cfg)?, &dir)
}

pub fn stage_calibrate(cfg: &PipelineConfig, art: &Artifacts) -> Result<BTreeMap<String, f32>> {
    let mut scales = BTreeMap::new();
    if cfg.strategy != QuantStrategy::None {
        let model = load_model(&art.sparse())?;
        let capture = CalibCapture::load(&art.capture())?;
        let ids: Vec<String> = quantized_layers(cfg, &model).iter().map(|l| l.id.clone()).collect();
        let results: Vec<Result<(String, f32)>> = ids
            .par_iter()
            .map(|id| {
                let samples = capture.tensors(id)?;
                let r = calibrate(&samples, cfg.calib_mode).map_err(|e| match e {
                    Error::Calibration(m) => Error::Calibration(format!("{id}: {m}")),
                    other => other,
                })?;
                Ok((id.clone(), r.params.scale()))
            })
            .collect();
        for r in results {
            let (id, s) = r?;
            scales.insert(id, s);
        }
    }
    write_atomic(&art.act_scales(), scales_to_text(&scales).as_bytes())?;
    Ok(scales)
}

pub fn weight_scale(strategy: QuantStrategy, w: &Tensor) -> Result<QuantParams> {
    match strategy {
        QuantStrategy::KlAdmm => Ok(optimize_weight_scale(w)?.0),
        _ => QuantParams::new(maxabs_scale(w)?),
    }
}

pub fn stage_quantize(cfg: &PipelineConfig, art: &Artifacts) -> Result<BTreeMap<String, f32>> {
    let mut scales = BTreeMap::new();
    if cfg.strategy != QuantStrategy::None {
        let model = load_model(&art.sparse())?;
        let layers = quantized_layers(cfg, &model);
        let results: Vec<Result<(String, f32)>> = layers
            .par_iter()
            .map(|l| {
                let p = weight_scale(cfg.strategy, &model.params()[l.weight].tensor)
                    .map_err(|e| Error::Calibration(format!("{}: {e}", l.id)))?;
                Ok((l.id.clone(), p.scale()))
            })
            .collect();
        for r in results {
            let (id, s) = r?;
            scales.insert(id, s);
        }
    }
    write_atomic(&art.weight_scales(), scales_to_text(&scales).as_bytes())?;
    Ok(scales)
}

/// Per-layer label-free costs from the captured activations.
pub fn layer_costs(
    model: &Model,
    capture: &CalibCapture,
    ids: &[String],
    act: &BTreeMap<String, f32>,
    weights: &BTreeMap<String, f32>,
) -> Result<Vec<LayerCost>> {
    ids.par_iter()
        .map(|id| {
            let info = model
                .linear_layers()
                .iter()
                .find(|l| &l.id == id)
                .ok_or_else(|| Error::Config(format!("unknown layer `{id}`")))?;
            let missing = || Error::Config(format!("layer {id} has no scale"));
            let aq = QuantParams::new(*act.get(id).ok_or_else(missing)?)?;
            let wq = QuantParams::new(*weights.get(id).ok_or_else(missing)?)?;
            let layer = LinearLayer {
                id,
                weight: &model.params()[info.weight].tensor,
                bias: info.bias.map(|b| &model.params()[b].tensor),
            };
            layer_cost(&layer, &capture.tensors(id)?, &wq, &aq)
        })
        .collect()
}

pub fn stage_amp(cfg: &PipelineConfig, art: &Artifacts) -> Result<PrecisionPlan> {
    let model = load_model(&art.sparse())?;
    let excluded = all_excluded(cfg, &model);
    let plan = if cfg.strategy == QuantStrategy::None {
        let ids: Vec<String> = model.linear_layers().iter().map(|l| l.id.clone()).collect();
        PrecisionPlan::uniform(&ids, Precision::Float32, &excluded)
    } else {
        let capture = CalibCapture::load(&art.capture())?;
        let act = scales_from_text(&read_text(&art.act_scales())?)?;
        let weights = scales_from_text(&read_text(&art.weight_scales())?)?;
        let ids: Vec<String> = quantized_layers(cfg, &model).iter().map(|l| l.id.clone()).collect();
        let mut costs = layer_costs(&model, &capture, &ids, &act, &weights)?;
        // Excluded layers appear in the plan with a zero cost; they never use budget.
        for id in &excluded {
            costs.push(LayerCost {
                layer_id: id.clone(),
                cost: 0.0,
                sample_count: 0,
            });
        }
        select_fallback(&costs, cfg.amp_k, &excluded)?
    };
    write_atomic(&art.plan(), plan.to_text().as_bytes())?;
    Ok(plan)
}

pub fn stage_pack(cfg: &PipelineConfig, art: &Artifacts) -> Result<CompressedModel> {
    let model = load_model(&art.sparse())?;
    let mask = load_mask(&model, &art.mask())?;
    let plan = PrecisionPlan::from_text(&read_text(&art.plan())?)?;
    let act = scales_from_text(&read_text(&art.act_scales())?)?;
    let weights = scales_from_text(&read_text(&art.weight_scales())?)?;

    let mut meta = GraphMeta::new(*model.config());
    let mut weight_scales = BTreeMap::new();
    for l in model.linear_layers() {
        let int8 = plan.precision_of(&l.id) == Some(Precision::Int8);
        if int8 {
            let missing = || Error::Config(format!("int8 layer {} lacks a scale", l.id));
            meta.act_scales.insert(l.id.clone(), *act.get(&l.id).ok_or_else(missing)?);
            let w = QuantParams::new(*weights.get(&l.id).ok_or_else(missing)?)?;
            weight_scales.insert(model.params()[l.weight].name.clone(), w);
        } else if cfg.strategy != QuantStrategy::None {
            meta.float_layers.push(l.id.clone());
        }
    }
    let pruned = mask.pruned() > 0;
    let cm = pack_model(
        &model,
        &meta,
        &PackPlan {
            weight_scales,
            mask: pruned.then_some(&mask),
        },
    )?;
    cm.write(&art.model())?;
    Ok(cm)
}

/// Activation fake-quant hooks for a packed model, optionally overridden by a plan.
pub fn act_hooks(model: &Model, meta: &GraphMeta, plan: Option<&PrecisionPlan>) -> Result<Vec<Option<QuantParams>>> {
    if let Some(plan) = plan {
        for e in &plan.entries {
            if !model.linear_layers().iter().any(|l| l.id == e.layer_id) {
                return Err(Error::Config(format!("plan names unknown layer `{}`", e.layer_id)));
            }
        }
    }
    model
        .linear_layers()
        .iter()
        .map(|l| {
            let float = match plan {
                Some(p) => p.precision_of(&l.id) != Some(Precision::Int8),
                None => !meta.act_scales.contains_key(&l.id),
            };
            if float {
                return Ok(None);
            }
            let s = meta
                .act_scales
                .get(&l.id)
                .ok_or_else(|| Error::Config(format!("plan marks {} int8 but it has no activation scale", l.id)))?;
            Ok(Some(QuantParams::new(*s)?))
        })
        .collect()
}

/// Accuracy of the packed model under fake quantization, against the float reference.
pub fn evaluate(
    packed: &CompressedModel,
    reference: &Model,
    data: &[Example],
    plan: Option<&PrecisionPlan>,
) -> Result<EvalSummary> {
    let (model, meta) = unpack_model(packed)?;
    let quant = act_hooks(&model, &meta, plan)?;
    // A plan may send int8-stored weights back to float: use the reference weights there.
    let mut model = model;
    if let Some(plan) = plan {
        for l in reference.linear_layers() {
            if plan.precision_of(&l.id) != Some(Precision::Int8) {
                model.set_param(l.weight, reference.params()[l.weight].tensor.clone())?;
            }
        }
    }
    let float_acc = crate::model::accuracy(reference, data)?;
    let quant_acc = accuracy_with(
        &model,
        data,
        &mut ForwardHooks {
            act_quant: Some(&quant),
            capture: None,
        },
    )?;
    let mut mse = 0.0;
    for ex in data {
        let a = reference.forward(ex)?;
        let b = model.forward_with(
            ex,
            &mut ForwardHooks {
                act_quant: Some(&quant),
                capture: None,
            },
        )?;
        mse += crate::tensor::mse(&a, &b)?;
    }
    Ok(EvalSummary {
        float_accuracy: float_acc,
        quant_accuracy: quant_acc,
        logits_mse: mse / data.len() as f64,
    })
}

pub fn stage_evaluate(cfg: &PipelineConfig, art: &Artifacts) -> Result<EvalSummary> {
    let packed = CompressedModel::read(&art.model())?;
    let reference = load_model(&art.sparse())?;
    let summary = evaluate(&packed, &reference, &eval_set(cfg)?, None)?;
    write_atomic(&art.eval(), summary.to_text().as_bytes())?;
    Ok(summary)
}

pub fn stage_report(cfg: &PipelineConfig, art: &Artifacts) -> Result<PipelineReport> {
    let packed = CompressedModel::read(&art.model())?;
    let plan = PrecisionPlan::from_text(&read_text(&art.plan())?)?;
    let eval = EvalSummary::from_text(&read_text(&art.eval())?)?;
    let size = model_size_report(&packed)?;
    let report = PipelineReport {
        row: cfg.table_row(),
        sparsity: cfg.sparsity,
        calib_mode: cfg.calib_mode,
        strategy: cfg.strategy,
        amp_k: cfg.amp_k,
        fallback_layers: plan
            .fallback_layers()
            .iter()
            .map(|s| s.to_string())
            .collect(),
        excluded: plan.excluded.clone(),
        eval,
        size,
    };
    write_atomic(&art.report(), report.to_text().as_bytes())?;
    Ok(report)
}

/// Runs one stage by name.
pub fn run_stage(stage: &str, cfg: &PipelineConfig, art: &Artifacts) -> Result<()> {
    let r = match stage {
        "pretrain" => stage_pretrain(cfg, art),
        "sparse-train" => stage_sparse_train(cfg, art),
        "capture" => stage_capture(cfg, art).map(drop),
        "calibrate" => stage_calibrate(cfg, art).map(drop),
        "quantize" => stage_quantize(cfg, art).map(drop),
        "amp" => stage_amp(cfg, art).map(drop),
        "pack" => stage_pack(cfg, art).map(drop),
        "evaluate" => stage_evaluate(cfg, art).map(drop),
        "report" => stage_report(cfg, art).map(drop),
        other => return Err(Error::Config(format!("unknown stage `{other}`"))),
    };
    let name = STAGES.iter().find(|s| **s == stage).copied().unwrap_or("unknown");
    r.map_err(|e| e.in_stage(name))
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: CompressedModel,
    pub model_path: PathBuf,
    pub report: PipelineReport,
    pub stage_log: Vec<String>,
}

fn remove_outputs(art: &Artifacts, stage: &str) {
    for p in art.outputs(stage) {
        if p.is_dir() {
            let _ = fs::remove_dir_all(&p);
        } else {
            let _ = fs::remove_file(&p);
        }
    }
}

/// All stages in order. On failure the failing stage's outputs are removed
/// and the error names the stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let art = Artifacts::new(&cfg.work_dir);
    ensure_dir(&art.dir)?;
    let mut log = Vec::new();
    let mut report = None;
    for stage in STAGES {
        let r = if stage == "report" {
            stage_report(cfg, &art)
                .map(|r| report = Some(r))
                .map_err(|e| e.in_stage("report"))
        } else {
            run_stage(stage, cfg, &art)
        };
        if let Err(e) = r {
            remove_outputs(&art, stage);
            log.push(format!("{stage} failed"));
            let _ = fs::write(art.stage_log(), log.join("\n") + "\n");
            return Err(e);
        }
        log.push(stage.to_string());
    }
    write_atomic(&art.stage_log(), (log.join("\n") + "\n").as_bytes())?;
    let report = report.expect("report stage ran");
    Ok(PipelineOutput {
        model: CompressedModel::read(&art.model())?,
        model_path: art.model(),
        report,
        stage_log: log,
    })
}
