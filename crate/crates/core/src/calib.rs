//! Activation-scale calibration by KL-divergence threshold search.
//!
//! Two histogram flavours are supported. [`HistMode::Absolute`] bins `|v|`
//! over `[0, max|v|]` and re-quantizes candidates onto 128 levels, the
//! classic entropy calibration for ReLU outputs. [`HistMode::Real`] bins the
//! signed values over `[-max|v|, max|v|]` with twice as many bins and
//! re-quantizes onto 256 levels, so negative and positive tails are seen
//! separately. Both produce a one-sided magnitude threshold `T` and a scale
//! `T / 127`. Exact zeros are never counted.

use crate::error::{Error, Result};
use crate::quant::{QuantParams, INT8_BOUND};
use crate::tensor::Tensor;

pub const ABSOLUTE_BINS: usize = 2048;
pub const REAL_BINS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HistMode {
    Absolute,
    Real,
}

impl HistMode {
    pub fn default_bins(self) -> usize {
        match self {
            HistMode::Absolute => ABSOLUTE_BINS,
            HistMode::Real => REAL_BINS,
        }
    }

    /// Number of levels a candidate window is re-quantized onto.
    pub fn target_levels(self) -> usize {
        match self {
            HistMode::Absolute => 128,
            HistMode::Real => 256,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HistMode::Absolute => "absolute",
            HistMode::Real => "real",
        }
    }
}

impl std::str::FromStr for HistMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "absolute" | "abs" => Ok(HistMode::Absolute),
            "real" => Ok(HistMode::Real),
            other => Err(Error::Config(format!("unknown calibration mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibHistogram {
    mode: HistMode,
    range_lo: f32,
    range_hi: f32,
    counts: Vec<u64>,
}

impl CalibHistogram {
    /// Empty histogram over the range implied by `max_abs`, with the mode's default bin count.
    pub fn with_range(mode: HistMode, max_abs: f32) -> Result<Self> {
        Self::with_bins(mode, mode.default_bins(), max_abs)
    }

    pub fn with_bins(mode: HistMode, bin_count: usize, max_abs: f32) -> Result<Self> {
        if !(max_abs.is_finite() && max_abs > 0.0) {
            return Err(Error::Calibration(format!(
                "histogram range needs a positive finite max, got {max_abs}"
            )));
        }
        if bin_count == 0 || (mode == HistMode::Real && !bin_count.is_multiple_of(2)) {
            return Err(Error::Config(format!(
                "invalid bin count {bin_count} for {} histogram",
                mode.name()
            )));
        }
        let range_lo = match mode {
            HistMode::Absolute => 0.0,
            HistMode::Real => -max_abs,
        };
        Ok(Self {
            mode,
            range_lo,
            range_hi: max_abs,
            counts: vec![0; bin_count],
        })
    }

    /// Builds a histogram directly from counts (useful for tests and replay).
    pub fn from_counts(mode: HistMode, max_abs: f32, counts: Vec<u64>) -> Result<Self> {
        let mut h = Self::with_bins(mode, counts.len(), max_abs)?;
        h.counts = counts;
        Ok(h)
    }

    pub fn mode(&self) -> HistMode {
        self.mode
    }

    pub fn bin_count(&self) -> usize {
        self.counts.len()
    }

    pub fn range_lo(&self) -> f32 {
        self.range_lo
    }

    pub fn range_hi(&self) -> f32 {
        self.range_hi
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn zero_excluded(&self) -> bool {
        true
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Bins per unit of magnitude: both modes share the same bin width.
    fn half_bins(&self) -> usize {
        match self.mode {
            HistMode::Absolute => self.counts.len(),
            HistMode::Real => self.counts.len() / 2,
        }
    }

    pub fn bin_width(&self) -> f32 {
        self.range_hi / self.half_bins() as f32
    }

    fn bin_of(&self, v: f32) -> usize {
        let half = self.half_bins();
        let k = ((v.abs() as f64 / self.range_hi as f64) * half as f64) as usize;
        let k = k.min(half - 1);
        match self.mode {
            HistMode::Absolute => k,
            HistMode::Real if v > 0.0 => half + k,
            HistMode::Real => half - 1 - k,
        }
    }

    /// Adds non-zero values; values beyond the range land in the edge bins.
    pub fn accumulate(&mut self, values: &[f32]) {
        for &v in values {
            if v == 0.0 || !v.is_finite() {
                continue;
            }
            let b = self.bin_of(v);
            self.counts[b] += 1;
        }
    }

    /// Elementwise count addition. Both histograms must share mode, bins and range.
    pub fn merge(&mut self, other: &CalibHistogram) -> Result<()> {
        if self.mode != other.mode
            || self.counts.len() != other.counts.len()
            || self.range_hi != other.range_hi
        {
            return Err(Error::Calibration(
                "cannot merge histograms with different mode, bins or range".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Two passes over the samples: one for the shared range, one for binning.
pub fn collect_histogram(samples: &[Tensor], mode: HistMode) -> Result<CalibHistogram> {
    let max_abs = samples.iter().fold(0.0f32, |m, t| m.max(t.max_abs()));
    if max_abs == 0.0 {
        return Err(Error::Calibration(
            "calibration data contains no non-zero activations".into(),
        ));
    }
    let mut h = CalibHistogram::with_range(mode, max_abs)?;
    for t in samples {
        h.accumulate(t.data());
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdResult {
    pub threshold: f32,
    pub divergence: f64,
    pub params: QuantParams,
    /// Candidate size in bins of magnitude (window half-width in Real mode).
    pub candidate_bins: usize,
}

/// One evaluated threshold candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub bins: usize,
    pub threshold: f32,
    pub divergence: f64,
}

/// KL(P || Q) for one candidate window of `i` magnitude bins.
///
/// P is the window with out-of-range mass folded into its edge bins. Q is the
/// window *without* the folded mass, merged onto the target levels and spread
/// uniformly over the bins where P is non-zero. A candidate whose Q vanishes
/// somewhere P does not has infinite divergence.
fn candidate_divergence(h: &CalibHistogram, i: usize) -> f64 {
    let half = h.half_bins();
    let levels = h.mode.target_levels();
    let (lo, hi) = match h.mode {
        HistMode::Absolute => (0, i),
        HistMode::Real => (half - i, half + i),
    };
    let window: Vec<f64> = h.counts[lo..hi].iter().map(|c| *c as f64).collect();
    let mut p = window.clone();
    let left: u64 = h.counts[..lo].iter().sum();
    let right: u64 = h.counts[hi..].iter().sum();
    p[0] += left as f64;
    let last = p.len() - 1;
    p[last] += right as f64;

    let width = p.len();
    let mut q = vec![0.0f64; width];
    for g in 0..levels {
        let (start, stop) = (g * width / levels, (g + 1) * width / levels);
        let mass: f64 = window[start..stop].iter().sum();
        let nonzero = p[start..stop].iter().filter(|v| **v > 0.0).count();
        if nonzero == 0 {
            continue;
        }
        let share = mass / nonzero as f64;
        for j in start..stop {
            if p[j] > 0.0 {
                q[j] = share;
            }
        }
    }
    let p_total: f64 = p.iter().sum();
    let q_total: f64 = q.iter().sum();
    if q_total == 0.0 {
        return f64::INFINITY;
    }
    let mut kl = 0.0;
    for (pv, qv) in p.iter().zip(&q) {
        if *pv == 0.0 {
            continue;
        }
        if *qv == 0.0 {
            return f64::INFINITY;
        }
        let (pn, qn) = (pv / p_total, qv / q_total);
        kl += pn * (pn / qn).ln();
    }
    kl
}

/// Divergence for every candidate threshold, smallest threshold first.
pub fn divergence_profile(h: &CalibHistogram) -> Vec<Candidate> {
    let half = h.half_bins();
    // Candidates need at least one bin per level; Real windows span 2i bins.
    let min_bins = match h.mode {
        HistMode::Absolute => h.mode.target_levels(),
        HistMode::Real => h.mode.target_levels() / 2,
    };
    if half < min_bins {
        return Vec::new();
    }
    let width = h.bin_width();
    (min_bins..=half)
        .map(|i| Candidate {
            bins: i,
            threshold: if i == half { h.range_hi } else { i as f32 * width },
            divergence: candidate_divergence(h, i),
        })
        .collect()
}

/// Picks the threshold minimizing KL(P || Q_T); ties go to the smaller threshold.
pub fn search_threshold(h: &CalibHistogram) -> Result<ThresholdResult> {
    if h.total() == 0 {
        return Err(Error::Calibration("histogram is empty".into()));
    }
    let profile = divergence_profile(h);
    let best = profile.iter().fold(None::<Candidate>, |best, c| match best {
        Some(b) if b.divergence <= c.divergence => Some(b),
        _ => Some(*c),
    });
    let (threshold, divergence, candidate_bins) = match best {
        Some(c) => (c.threshold, c.divergence, c.bins),
        // Too few bins to form any candidate.
        None => (h.range_hi, 0.0, h.half_bins()),
    };
    Ok(ThresholdResult {
        threshold,
        divergence,
        params: scale_from_threshold(threshold)?,
        candidate_bins,
    })
}

pub fn scale_from_threshold(threshold: f32) -> Result<QuantParams> {
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(Error::Value(format!("threshold must be positive, got {threshold}")));
    }
    QuantParams::new(threshold / INT8_BOUND as f32)
}

/// Collect + search in one call.
pub fn calibrate(samples: &[Tensor], mode: HistMode) -> Result<ThresholdResult> {
    search_threshold(&collect_histogram(samples, mode)?)
}
