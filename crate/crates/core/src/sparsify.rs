//! Unstructured sparsification driven by EMA'd Taylor importance.
//!
//! Importance starts as `|w|` and is updated every training step with
//! `I_t = a * I_{t-1} + (1 - a) * (w_t * g_t)^2`, `a = 0.99`. At each mask
//! event all prunable weights are ranked together, so per-layer sparsity falls
//! out of the global ranking. The target ratio follows a linear staircase.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMA_ALPHA: f64 = 0.99;
pub const DEFAULT_UPDATE_INTERVAL: u64 = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceState {
    /// One importance vector per prunable tensor, flat row-major.
    pub importance: Vec<Vec<f64>>,
    pub shapes: Vec<Vec<usize>>,
    pub alpha: f64,
    pub step: u64,
}

pub fn init_importance(weights: &[&Tensor]) -> ImportanceState {
    ImportanceState {
        importance: weights
            .iter()
            .map(|w| w.data().iter().map(|v| v.abs() as f64).collect())
            .collect(),
        shapes: weights.iter().map(|w| w.shape().to_vec()).collect(),
        alpha: EMA_ALPHA,
        step: 0,
    }
}

impl ImportanceState {
    fn check_aligned(&self, what: &str, ts: &[&Tensor]) -> Result<()> {
        if ts.len() != self.shapes.len() {
            return Err(Error::dim(format!(
                "{what}: expected {} tensors, got {}",
                self.shapes.len(),
                ts.len()
            )));
        }
        for (i, (t, s)) in ts.iter().zip(&self.shapes).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(Error::dim(format!(
                    "{what}[{i}]: shape {:?} does not match {:?}",
                    t.shape(),
                    s
                )));
            }
        }
        Ok(())
    }

    /// One EMA step in place.
    pub fn update(&mut self, w: &[&Tensor], g: &[&Tensor]) -> Result<()> {
        self.check_aligned("weights", w)?;
        self.check_aligned("gradients", g)?;
        let a = self.alpha;
        for ((imp, wt), gt) in self.importance.iter_mut().zip(w).zip(g) {
            for ((i, wv), gv) in imp.iter_mut().zip(wt.data()).zip(gt.data()) {
                let taylor = *wv as f64 * *gv as f64;
                *i = a * *i + (1.0 - a) * taylor * taylor;
            }
        }
        self.step += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.importance.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// f32 tensors for checkpointing with the raw dump format.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.importance
            .iter()
            .zip(&self.shapes)
            .map(|(v, s)| {
                Tensor::new(s.clone(), v.iter().map(|x| *x as f32).collect())
                    .expect("importance values are finite")
            })
            .collect()
    }
}

/// Pure form of [`ImportanceState::update`].
pub fn update_importance(
    state: &ImportanceState,
    w: &[&Tensor],
    g: &[&Tensor],
) -> Result<ImportanceState> {
    let mut next = state.clone();
    next.update(w, g)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsitySchedule {
    pub start_step: u64,
    pub end_step: u64,
    pub final_sparsity: f64,
    pub update_interval: u64,
}

impl SparsitySchedule {
    pub fn new(start_step: u64, end_step: u64, final_sparsity: f64, update_interval: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&final_sparsity) {
            return Err(Error::Config(format!(
                "final sparsity must lie in [0, 1), got {final_sparsity}"
            )));
        }
        if end_step < start_step {
            return Err(Error::Config(format!(
                "schedule ends ({end_step}) before it starts ({start_step})"
            )));
        }
        if update_interval == 0 {
            return Err(Error::Config("update interval must be positive".into()));
        }
        Ok(Self {
            start_step,
            end_step,
            final_sparsity,
            update_interval,
        })
    }

    /// A schedule that never prunes.
    pub fn dense() -> Self {
        Self {
            start_step: 0,
            end_step: 0,
            final_sparsity: 0.0,
            update_interval: DEFAULT_UPDATE_INTERVAL,
        }
    }

    pub fn ratio(&self, t: u64) -> f64 {
        schedule_ratio(self, t)
    }

    /// Steps at which the mask is recomputed.
    pub fn is_mask_event(&self, t: u64) -> bool {
        t >= self.start_step && ((t - self.start_step).is_multiple_of(self.update_interval) || t == self.end_step)
    }
}

/// Linear staircase from 0 at `start_step` to `final_sparsity` at `end_step`.
pub fn schedule_ratio(s: &SparsitySchedule, t: u64) -> f64 {
    if t >= s.end_step {
        return s.final_sparsity;
    }
    if t < s.start_step {
        return 0.0;
    }
    let elapsed = t - s.start_step;
    let stair = elapsed - elapsed % s.update_interval;
    s.final_sparsity * stair as f64 / (s.end_step - s.start_step) as f64
}

/// `floor(ratio * n)`, guarded against ratios like 0.3 landing a hair below an integer.
pub fn pruned_count(ratio: f64, n: usize) -> usize {
    let exact = ratio * n as f64;
    let nearest = exact.round();
    let k = if (exact - nearest).abs() < 1e-9 * n.max(1) as f64 {
        nearest
    } else {
        exact.floor()
    };
    (k.max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseMask {
    /// `true` keeps the weight.
    pub keep: Vec<Vec<bool>>,
}

impl SparseMask {
    pub fn all_keep(shapes: &[Vec<usize>]) -> Self {
        Self {
            keep: shapes
                .iter()
                .map(|s| vec![true; s.iter().product()])
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.keep.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pruned(&self) -> usize {
        self.keep.iter().flatten().filter(|k| !**k).count()
    }

    /// Zeroes pruned positions in place.
    pub fn apply(&self, weights: &mut [&mut Tensor]) -> Result<()> {
        if weights.len() != self.keep.len() {
            return Err(Error::dim("mask and weight lists differ in length"));
        }
        for (w, k) in weights.iter_mut().zip(&self.keep) {
            if w.len() != k.len() {
                return Err(Error::dim("mask and weight tensor differ in size"));
            }
            for (v, keep) in w.data_mut().iter_mut().zip(k) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }

    pub fn to_tensors(&self, shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        self.keep
            .iter()
            .zip(shapes)
            .map(|(k, s)| Tensor::new(s.clone(), k.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()))
            .collect()
    }

    pub fn from_tensors(ts: &[Tensor]) -> Self {
        Self {
            keep: ts.iter().map(|t| t.data().iter().map(|v| *v != 0.0).collect()).collect(),
        }
    }
}

/// Prunes the `floor(ratio * N)` least important weights across all tensors.
/// Ties are pruned in (tensor index, flat offset) order.
pub fn global_mask(importance: &[Vec<f64>], ratio: f64) -> SparseMask {
    let n: usize = importance.iter().map(Vec::len).sum();
    let k = pruned_count(ratio, n);
    let mut keep: Vec<Vec<bool>> = importance.iter().map(|v| vec![true; v.len()]).collect();
    if k == 0 {
        return SparseMask { keep };
    }
    let mut order: Vec<(f64, usize, usize)> = importance
        .iter()
        .enumerate()
        .flat_map(|(l, v)| v.iter().enumerate().map(move |(o, i)| (*i, l, o)))
        .collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, l, o) in &order[..k] {
        keep[l][o] = false;
    }
    SparseMask { keep }
}

pub fn apply_global_mask(state: &ImportanceState, schedule: &SparsitySchedule, t: u64) -> SparseMask {
    global_mask(&state.importance, schedule.ratio(t))
}

/// Training-loop companion: owns the importance state, re-ranks at mask
/// events and freezes the mask once the schedule reaches its final ratio.
#[derive(Debug, Clone)]
pub struct Sparsifier {
    pub state: ImportanceState,
    pub schedule: SparsitySchedule,
    mask: SparseMask,
    frozen: bool,
}

impl Sparsifier {
    pub fn new(weights: &[&Tensor], schedule: SparsitySchedule) -> Self {
        let state = init_importance(weights);
        let mask = SparseMask::all_keep(&state.shapes);
        Self {
            state,
            schedule,
            mask,
            frozen: false,
        }
    }

    pub fn mask(&self) -> &SparseMask {
        &self.mask
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn observe(&mut self, w: &[&Tensor], g: &[&Tensor]) -> Result<()> {
        self.state.update(w, g)
    }

    /// Recomputes the mask if `t` is a mask event. Returns whether it changed.
    pub fn step_mask(&mut self, t: u64) -> bool {
        if self.frozen || !self.schedule.is_mask_event(t) {
            return false;
        }
        let next = apply_global_mask(&self.state, &self.schedule, t);
        if t >= self.schedule.end_step {
            self.frozen = true;
        }
        let changed = next != self.mask;
        self.mask = next;
        changed
    }

    /// Ranks once more at the final ratio and freezes, whatever step we are at.
    pub fn finalize(&mut self) {
        if !self.frozen {
            self.mask = global_mask(&self.state.importance, self.schedule.final_sparsity);
            self.frozen = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn init_is_magnitude() {
        let w = t(&[-3.0, 2.0, 0.0]);
        let s = init_importance(&[&w]);
        assert_eq!(s.importance, vec![vec![3.0, 2.0, 0.0]]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn ema_examples() {
        let w = t(&[2.0]);
        let mut s = init_importance(&[&w]);
        s.importance[0][0] = 1.0;
        let next = update_importance(&s, &[&w], &[&t(&[3.0])]).unwrap();
        assert!((next.importance[0][0] - 1.35).abs() < 1e-12);
        assert_eq!(next.step, 1);

        let decay = update_importance(&s, &[&w], &[&t(&[0.0])]).unwrap();
        assert!((decay.importance[0][0] - 0.99).abs() < 1e-15);

        assert!(update_importance(&s, &[&w], &[&t(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn schedule_examples() {
        let s = SparsitySchedule::new(100, 1100, 0.5, 100).unwrap();
        assert_eq!(s.ratio(0), 0.0);
        assert_eq!(s.ratio(99), 0.0);
        assert_eq!(s.ratio(600), 0.25);
        assert_eq!(s.ratio(650), 0.25);
        assert_eq!(s.ratio(1100), 0.5);
        assert_eq!(s.ratio(5000), 0.5);
        assert!(SparsitySchedule::new(0, 10, 1.0, 1).is_err());
        assert!(SparsitySchedule::new(10, 0, 0.5, 1).is_err());
    }

    #[test]
    fn global_ranking_across_layers() {
        let imp = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let m = global_mask(&imp, 0.5);
        assert_eq!(m.keep, vec![vec![false, false], vec![true, true]]);
        assert_eq!(global_mask(&imp, 0.0).pruned(), 0);
    }

    #[test]
    fn ties_prune_earlier_positions_first() {
        let imp = vec![vec![1.0, 1.0], vec![1.0, 0.5]];
        let m = global_mask(&imp, 0.5);
        assert_eq!(m.keep, vec![vec![false, true], vec![true, false]]);
    }

    #[test]
    fn counts_for_table_ratios() {
        for (r, n) in [(0.3, 1000), (0.4, 1000), (0.5, 1000), (0.3, 10), (0.7, 10), (0.5, 7)] {
            let want = (r * n as f64 + 1e-9).floor() as usize;
            assert_eq!(pruned_count(r, n), want, "{r} x {n}");
        }
    }

    #[test]
    fn mask_freezes_after_end_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = t(&(0..50).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>());
        let sched = SparsitySchedule::new(0, 20, 0.4, 5).unwrap();
        let mut sp = Sparsifier::new(&[&w], sched);
        for step in 1..=20 {
            let g = t(&(0..50).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>());
            sp.observe(&[&w], &[&g]).unwrap();
            sp.step_mask(step);
        }
        assert!(sp.is_frozen());
        let frozen = sp.mask().clone();
        assert_eq!(frozen.pruned(), 20);
        for step in 21..60 {
            let g = t(&(0..50).map(|_| rng.random_range(-5.0f32..5.0)).collect::<Vec<_>>());
            sp.observe(&[&w], &[&g]).unwrap();
            assert!(!sp.step_mask(step));
        }
        assert_eq!(sp.mask(), &frozen);
    }

    #[test]
    fn mask_round_trips_through_tensors() {
        let imp = vec![vec![0.1, 0.9, 0.4, 0.3], vec![0.5, 0.2]];
        let m = global_mask(&imp, 0.5);
        let shapes = vec![vec![2, 2], vec![2]];
        let ts = m.to_tensors(&shapes).unwrap();
        assert_eq!(SparseMask::from_tensors(&ts), m);
    }

    #[test]
    fn ema_matches_unrolled_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 16;
        let w0 = t(&(0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>());
        let mut s = init_importance(&[&w0]);
        let mut terms = Vec::new();
        for _ in 0..100 {
            let w = t(&(0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>());
            let g = t(&(0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>());
            s.update(&[&w], &[&g]).unwrap();
            terms.push((w, g));
        }
        let k = terms.len() as i32;
        for i in 0..n {
            let mut want = 0.99f64.powi(k) * w0.data()[i].abs() as f64;
            for (j, (w, g)) in terms.iter().enumerate() {
                let x = w.data()[i] as f64 * g.data()[i] as f64;
                want += 0.01 * 0.99f64.powi(k - 1 - j as i32) * x * x;
            }
            let got = s.importance[0][i];
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-30), "{got} vs {want}");
        }
    }

    proptest! {
        #[test]
        fn ranking_is_sound(vals in prop::collection::vec(0.0f64..10.0, 2..200), split in 1usize..199, ratio in 0.0f64..0.95) {
            let split = split.min(vals.len() - 1);
            let imp = vec![vals[..split].to_vec(), vals[split..].to_vec()];
            let m = global_mask(&imp, ratio);
            prop_assert_eq!(m.pruned(), pruned_count(ratio, vals.len()));
            let max_pruned = imp.iter().zip(&m.keep).flat_map(|(v, k)| v.iter().zip(k)).filter(|(_, k)| !**k).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            let min_kept = imp.iter().zip(&m.keep).flat_map(|(v, k)| v.iter().zip(k)).filter(|(_, k)| **k).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
            prop_assert!(max_pruned <= min_kept);
        }

        #[test]
        fn schedule_is_monotone(start in 0u64..50, len in 0u64..500, fin in 0.0f64..0.99, iv in 1u64..40) {
            let s = SparsitySchedule::new(start, start + len, fin, iv).unwrap();
            let mut prev = 0.0;
            for step in 0..(start + len + 20) {
                let r = s.ratio(step);
                prop_assert!(r >= prev);
                prev = r;
            }
            prop_assert_eq!(s.ratio(start + len), fin);
        }
    }
}
