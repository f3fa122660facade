use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::net::{Example, ForwardHooks, Model};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TaskKind {
    #[default]
    Copy,
    Reverse,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

/// Random sequences over symbols `1..vocab`; symbol 0 is reserved for the decoder start.
pub fn generate(kind: TaskKind, count: usize, seq_len: usize, vocab: usize, seed: u64) -> Result<Vec<Example>> {
    if !(2..=64).contains(&vocab) {
        return Err(Error::Config(format!("task vocab must be in 2..=64, got {vocab}")));
    }
    if seq_len == 0 || seq_len > 16 {
        return Err(Error::Config(format!("sequence length must be in 1..=16, got {seq_len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let src: Vec<usize> = (0..seq_len).map(|_| rng.random_range(1..vocab)).collect();
            let tgt = match kind {
                TaskKind::Copy => src.clone(),
                TaskKind::Reverse => src.iter().rev().copied().collect(),
            };
            Example::new(src, tgt)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    /// Fraction of sequences with every position right.
    pub sequence: f64,
    pub token: f64,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v > row[b] { i } else { b })
}

/// Teacher-forced greedy accuracy, optionally under activation fake-quant hooks.
pub fn accuracy_with(model: &Model, data: &[Example], hooks: &mut ForwardHooks) -> Result<Accuracy> {
    if data.is_empty() {
        return Err(Error::Value("accuracy over an empty data set".into()));
    }
    let v = model.config().vocab;
    let (mut seq_ok, mut tok_ok, mut tok_total) = (0usize, 0usize, 0usize);
    for ex in data {
        let logits = model.logits_f64(ex, hooks)?;
        let hits = ex
            .tgt_out
            .iter()
            .enumerate()
            .filter(|(r, t)| argmax(&logits[r * v..(r + 1) * v]) == **t)
            .count();
        tok_ok += hits;
        tok_total += ex.tgt_out.len();
        seq_ok += usize::from(hits == ex.tgt_out.len());
    }
    Ok(Accuracy {
        sequence: seq_ok as f64 / data.len() as f64,
        token: tok_ok as f64 / tok_total as f64,
    })
}

pub fn accuracy(model: &Model, data: &[Example]) -> Result<Accuracy> {
    accuracy_with(model, data, &mut ForwardHooks::default())
}
