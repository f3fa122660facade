use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::calib::HistMode;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TaskKind, TrainConfig};
use crate::sparsify::SparsitySchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantStrategy {
    /// Keep every layer in float32.
    None,
    /// KL activation scales, max-abs weight scales.
    #[default]
    Kl,
    /// KL activation scales, ADMM-refined weight scales.
    KlAdmm,
}

impl fmt::Display for QuantStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantStrategy::None => "none",
            QuantStrategy::Kl => "kl",
            QuantStrategy::KlAdmm => "kl-admm",
        })
    }
}

impl FromStr for QuantStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(QuantStrategy::None),
            "kl" => Ok(QuantStrategy::Kl),
            "kl-admm" => Ok(QuantStrategy::KlAdmm),
            _ => Err(Error::Config(format!("unknown quantization strategy `{s}`"))),
        }
    }
}

/// Everything a pipeline run needs. Parsed from `key=value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub task: TaskKind,
    pub seq_len: usize,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub sparsity: f64,
    pub sparsity_start: u64,
    pub sparsity_end: u64,
    pub sparsity_interval: u64,
    pub calib_mode: HistMode,
    pub calib_batches: usize,
    pub calib_batch_size: usize,
    pub strategy: QuantStrategy,
    pub amp_k: usize,
    pub exclude: Vec<String>,
    pub work_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 0,
            task: TaskKind::Copy,
            seq_len: 8,
            train_examples: 512,
            eval_examples: 200,
            pretrain_steps: 600,
            finetune_steps: 300,
            lr: 0.1,
            batch_size: 8,
            sparsity: 0.5,
            sparsity_start: 0,
            sparsity_end: 200,
            sparsity_interval: 50,
            calib_mode: HistMode::Absolute,
            calib_batches: 4,
            calib_batch_size: 8,
            strategy: QuantStrategy::Kl,
            amp_k: 0,
            exclude: vec!["predict".to_string()],
            work_dir: PathBuf::from("lfam-work"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        if self.model.set(key, v)? {
            return Ok(());
        }
        match key {
            "seed" => self.seed = parse(key, v)?,
            "task" => self.task = v.parse()?,
            "seq_len" => self.seq_len = parse(key, v)?,
            "train_examples" => self.train_examples = parse(key, v)?,
            "eval_examples" => self.eval_examples = parse(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "finetune_steps" => self.finetune_steps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "sparsity" => self.sparsity = parse(key, v)?,
            "sparsity_start" => self.sparsity_start = parse(key, v)?,
            "sparsity_end" => self.sparsity_end = parse(key, v)?,
            "sparsity_interval" => self.sparsity_interval = parse(key, v)?,
            "calib_mode" => self.calib_mode = v.parse()?,
            "calib_batches" => self.calib_batches = parse(key, v)?,
            "calib_batch_size" => self.calib_batch_size = parse(key, v)?,
            "strategy" => self.strategy = v.parse()?,
            "amp_k" => self.amp_k = parse(key, v)?,
            "exclude" => {
                self.exclude = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "work_dir" => self.work_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.model.to_text();
        s.push_str(&format!(
            "seed={}\ntask={}\nseq_len={}\ntrain_examples={}\neval_examples={}\n",
            self.seed,
            self.task.name(),
            self.seq_len,
            self.train_examples,
            self.eval_examples
        ));
        s.push_str(&format!(
            "pretrain_steps={}\nfinetune_steps={}\nlr={}\nbatch_size={}\n",
            self.pretrain_steps, self.finetune_steps, self.lr, self.batch_size
        ));
        s.push_str(&format!(
            "sparsity={}\nsparsity_start={}\nsparsity_end={}\nsparsity_interval={}\n",
            self.sparsity, self.sparsity_start, self.sparsity_end, self.sparsity_interval
        ));
        s.push_str(&format!(
            "calib_mode={}\ncalib_batches={}\ncalib_batch_size={}\nstrategy={}\namp_k={}\nexclude={}\nwork_dir={}\n",
            self.calib_mode.name(),
            self.calib_batches,
            self.calib_batch_size,
            self.strategy,
            self.amp_k,
            self.exclude.join(","),
            self.work_dir.display()
        ));
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule()?;
        if self.train_examples == 0 || self.eval_examples == 0 {
            return Err(Error::Config("example counts must be positive".into()));
        }
        if self.calib_batches == 0 || self.calib_batch_size == 0 {
            return Err(Error::Config("calibration needs at least one non-empty batch".into()));
        }
        if self.batch_size == 0 || !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        if self.strategy == QuantStrategy::None && self.amp_k > 0 {
            return Err(Error::Config("amp_k needs a quantization strategy".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<SparsitySchedule> {
        SparsitySchedule::new(
            self.sparsity_start,
            self.sparsity_end,
            self.sparsity,
            self.sparsity_interval,
        )
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.pretrain_steps,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed.wrapping_mul(3).wrapping_add(1),
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.finetune_steps,
            seed: self.seed.wrapping_mul(3).wrapping_add(2),
            ..self.pretrain_config()
        }
    }

    pub(crate) fn data_seed(&self, purpose: u64) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(purpose)
    }

    /// Name of the matching quantization row: KL, KL† (with ADMM), plus `+AMP(k)`.
    pub fn table_row(&self) -> String {
        let base = match self.strategy {
            QuantStrategy::None => return "float32".to_string(),
            QuantStrategy::Kl => "KL",
            QuantStrategy::KlAdmm => "KL\u{2020}",
        };
        if self.amp_k > 0 {
            format!("{base}+AMP({})", self.amp_k)
        } else {
            base.to_string()
        }
    }
}
