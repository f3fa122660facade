//! Pre-train, sparse-train, capture, calibrate, quantize, AMP, pack, evaluate, report.

mod capture;
mod config;
mod report;
mod stages;

pub use capture::{batch_activations, capture_calibration, CalibCapture, CaptureEntry, MANIFEST};
pub use config::{PipelineConfig, QuantStrategy};
pub use report::{EvalSummary, PipelineReport};
pub use stages::{
    act_hooks, calib_batches, eval_set, evaluate, layer_costs, load_model, run_pipeline, run_stage, scales_from_text,
    scales_to_text, stage_amp, stage_calibrate, stage_capture, stage_evaluate, stage_pack, stage_pretrain,
    stage_quantize, stage_report, stage_sparse_train, weight_scale, Artifacts, PipelineOutput, STAGES,
};
