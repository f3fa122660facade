use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::net::{Example, Model};
use crate::error::{Error, Result};
use crate::sparsify::{global_mask, SparseMask, Sparsifier, SparsitySchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// Drives batch sampling only; parameter init has its own seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 0.1,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mini-batch loss before each update.
    pub losses: Vec<f64>,
    /// Final mask over [`Model::prunable_indices`], in that order.
    pub mask: SparseMask,
    /// Final Taylor importance over the prunable set; empty without a schedule.
    pub importance: Vec<Vec<f64>>,
}

fn prunable_shapes(model: &Model) -> Vec<Vec<usize>> {
    model
        .prunable_indices()
        .iter()
        .map(|i| model.params()[*i].tensor.shape().to_vec())
        .collect()
}

/// Zeroes masked prunable weights.
pub fn apply_mask(model: &mut Model, mask: &SparseMask) -> Result<()> {
    let idx = model.prunable_indices();
    if mask.keep.len() != idx.len() {
        return Err(Error::dim(format!(
            "mask covers {} tensors, model has {} prunable",
            mask.keep.len(),
            idx.len()
        )));
    }
    for (i, keep) in idx.iter().zip(&mask.keep) {
        let t = model.param_mut(*i);
        if t.len() != keep.len() {
            return Err(Error::dim("mask and weight tensor differ in size"));
        }
        for (v, k) in t.data_mut().iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

/// One-shot magnitude pruning of the prunable set, no further training.
pub fn prune_magnitude(model: &mut Model, ratio: f64) -> Result<SparseMask> {
    let mags: Vec<Vec<f64>> = model
        .prunable_indices()
        .iter()
        .map(|i| model.params()[*i].tensor.data().iter().map(|v| v.abs() as f64).collect())
        .collect();
    let mask = global_mask(&mags, ratio);
    apply_mask(model, &mask)?;
    Ok(mask)
}

/// Plain SGD with a fixed step size.
///
/// With a schedule, every step feeds the prunable weights and their gradients
/// to the sparsifier, keeps masked weights at zero and re-ranks at mask
/// events. `None` trains without any masking machinery.
pub fn train(
    model: &mut Model,
    data: &[Example],
    cfg: &TrainConfig,
    schedule: Option<SparsitySchedule>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Training("no training examples".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    let prunable = model.prunable_indices();
    let mut sparsifier = schedule.map(|s| {
        let w: Vec<&Tensor> = prunable.iter().map(|i| &model.params()[*i].tensor).collect();
        Sparsifier::new(&w, s)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps as usize);

    for step in 0..cfg.steps {
        let batch: Vec<Example> = (0..cfg.batch_size)
            .map(|_| data[rng.random_range(0..data.len())].clone())
            .collect();
        let (loss, mut grads) = model.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss is {loss} at step {step}")));
        }
        losses.push(loss);

        if let Some(sp) = sparsifier.as_mut() {
            for (i, keep) in prunable.iter().zip(&sp.mask().keep) {
                for (g, k) in grads[*i].iter_mut().zip(keep) {
                    if !k {
                        *g = 0.0;
                    }
                }
            }
            let gt = prunable
                .iter()
                .map(|i| {
                    let p = &model.params()[*i].tensor;
                    Tensor::new(p.shape().to_vec(), grads[*i].iter().map(|v| *v as f32).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            let w: Vec<&Tensor> = prunable.iter().map(|i| &model.params()[*i].tensor).collect();
            let g: Vec<&Tensor> = gt.iter().collect();
            sp.observe(&w, &g)?;
        }

        for (i, g) in grads.iter().enumerate() {
            for (w, d) in model.param_mut(i).data_mut().iter_mut().zip(g) {
                *w = (*w as f64 - cfg.lr * d) as f32;
            }
        }
        if model.params().iter().any(|p| p.tensor.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Training(format!("parameters diverged at step {step} (loss {loss})")));
        }

        if let Some(sp) = sparsifier.as_mut() {
            sp.step_mask(step + 1);
            let mask = sp.mask().clone();
            apply_mask(model, &mask)?;
        }
    }

    let (mask, importance) = match sparsifier {
        Some(mut sp) => {
            sp.finalize();
            let mask = sp.mask().clone();
            apply_mask(model, &mask)?;
            (mask, sp.state.importance)
        }
        None => (SparseMask::all_keep(&prunable_shapes(model)), Vec::new()),
    };
    Ok(TrainReport {
        losses,
        mask,
        importance,
    })
}
