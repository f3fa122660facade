use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lfam_core::amp::PrecisionPlan;
use lfam_core::format::{model_size_report, write_atomic, CompressedModel};
use lfam_core::pipeline::{
    eval_set, evaluate, load_model, run_pipeline, run_stage, Artifacts, PipelineConfig,
};

/// Sparsify, quantize and pack the toy encoder-decoder.
///
/// Every stage reads the shared config file (key=value lines) and then the
/// `--set` overrides, in order. Artifacts live under `work_dir`.
#[derive(Debug, Parser)]
#[command(name = "lfam", version)]
struct Cli {
    /// Config file with key=value lines.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key; repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Shorthand for `--set work_dir=DIR`.
    #[arg(short = 'w', long, global = true)]
    work_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train the dense model.
    Train,
    /// Sparse fine-tuning with Taylor importance.
    Sparsify,
    /// Dump per-layer calibration activations.
    Capture,
    /// KL threshold search for activation scales.
    Calibrate,
    /// Weight scales (max-abs, or ADMM with strategy kl-admm).
    Quantize,
    /// Per-layer sensitivity and Top-K float fallback plan.
    Amp,
    /// Write the compressed LFAM model.
    Pack,
    /// Accuracy and logits MSE of the packed model.
    Evaluate {
        /// Precision plan to evaluate instead of the packed one.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Print the results table and summary.
    Report,
    /// Every stage in order.
    Run,
    /// Print the effective configuration.
    Config,
    /// Size breakdown of an LFAM file.
    Inspect { file: PathBuf },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in config {}", path.display()))?;
    }
    for kv in &cli.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{kv}`");
        };
        cfg.set(k.trim(), v)?;
    }
    if let Some(dir) = &cli.work_dir {
        cfg.work_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage(name: &str, cfg: &PipelineConfig, art: &Artifacts) -> Result<()> {
    fs::create_dir_all(&art.dir).with_context(|| format!("creating {}", art.dir.display()))?;
    run_stage(name, cfg, art)?;
    let outs: Vec<String> = art.outputs(name).iter().map(|p| p.display().to_string()).collect();
    println!("{name}: wrote {}", outs.join(", "));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Inspect { file } = &cli.command {
        let cm = CompressedModel::read(file)?;
        print!("{}", model_size_report(&cm)?.to_text());
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    let art = Artifacts::new(&cfg.work_dir);
    match cli.command {
        Command::Train => stage("pretrain", &cfg, &art)?,
        Command::Sparsify => stage("sparse-train", &cfg, &art)?,
        Command::Capture => stage("capture", &cfg, &art)?,
        Command::Calibrate => stage("calibrate", &cfg, &art)?,
        Command::Quantize => stage("quantize", &cfg, &art)?,
        Command::Amp => stage("amp", &cfg, &art)?,
        Command::Pack => stage("pack", &cfg, &art)?,
        Command::Evaluate { plan: None } => {
            stage("evaluate", &cfg, &art)?;
            print!("{}", fs::read_to_string(art.eval())?);
        }
        Command::Evaluate { plan: Some(path) } => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading plan {}", path.display()))?;
            let plan = PrecisionPlan::from_text(&text)?;
            let packed = CompressedModel::read(&art.model())?;
            let reference = load_model(&art.sparse())?;
            let summary = evaluate(&packed, &reference, &eval_set(&cfg)?, Some(&plan))
                .with_context(|| format!("evaluating with plan {}", path.display()))?;
            write_atomic(&art.eval(), summary.to_text().as_bytes())?;
            print!("{}", summary.to_text());
        }
        Command::Report => {
            stage("report", &cfg, &art)?;
            print!("{}", fs::read_to_string(art.report())?);
        }
        Command::Run => {
            let out = run_pipeline(&cfg)?;
            print!("{}", out.report.to_text());
        }
        Command::Config => print!("{}", cfg.to_text()),
        Command::Inspect { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
