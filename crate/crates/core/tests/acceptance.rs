//! Acceptance criteria AC1..AC10. Each test prints one `ACn PASS|FAIL` line.
//!
//! Criteria run one at a time (see `serial`) so the wall-clock limits are not
//! distorted by sibling tests sharing the CPU.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use lfam_core::admm::{maxabs_scale, optimize_weight_scale};
use lfam_core::amp::{select_fallback, LayerCost, Precision};
use lfam_core::calib::{search_threshold, CalibHistogram, HistMode, ABSOLUTE_BINS, REAL_BINS};
use lfam_core::format::{CompressedModel, Encoding, Payload};
use lfam_core::model::{generate, train, Model, ModelConfig, TaskKind, TrainConfig};
use lfam_core::pipeline::{run_pipeline, PipelineConfig, QuantStrategy};
use lfam_core::quant::QuantParams;
use lfam_core::sparsify::{init_importance, update_importance, SparsitySchedule};
use lfam_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict line (bypassing the test harness capture) and asserts.
fn verdict(id: &str, what: &str, ok: bool, detail: String, elapsed: Duration, limit: Option<Duration>) {
    let in_time = limit.is_none_or(|l| elapsed < l);
    let pass = ok && in_time;
    let limit_txt = limit.map(|l| format!(" (limit {:.0?})", l)).unwrap_or_default();
    let line = format!(
        "{id} {}: {what}; {detail}; {:.2?}{limit_txt}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{id} failed: {detail}");
    assert!(in_time, "{id} exceeded its runtime limit: {elapsed:?}{limit_txt}");
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

// ---------------------------------------------------------------- AC1

#[test]
fn ac01_weight_sharing_storage_law() {
    let _g = serial();
    let t = Instant::now();
    let count = |s1: usize| {
        let cfg = ModelConfig {
            enc_blocks: 2,
            enc_share: s1,
            ..ModelConfig::default()
        };
        Model::new(cfg, 0).unwrap().unique_param_count()
    };
    let counts: Vec<usize> = (1..=4).map(count).collect();

    // Independent count for the default sizes with two unique encoder blocks.
    let c = ModelConfig::default();
    let (d, f, v) = (c.d_model, c.d_ff, c.vocab);
    let ln = 2 * d;
    let attn = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let enc_block = 2 * ln + attn + ffn;
    let dec_block = 3 * ln + 2 * attn + ffn;
    let expected = (v * d + d) + 2 * enc_block + ln + v * d + c.dec_blocks * dec_block + ln + (d * v + v);

    let ok = counts.iter().all(|n| *n == counts[0]) && counts[0] == expected;
    verdict(
        "AC1",
        "unique parameter count independent of S1",
        ok,
        format!("S1=1..4 -> {counts:?}, closed form {expected}"),
        t.elapsed(),
        secs(1),
    );
}

// ---------------------------------------------------------------- AC2

#[test]
fn ac02_gradient_correctness() {
    let _g = serial();
    let t = Instant::now();
    let cfg = ModelConfig {
        enc_blocks: 1,
        dec_blocks: 1,
        enc_share: 2,
        dec_share: 2,
        d_model: 8,
        d_ff: 16,
        vocab: 6,
    };
    let mut m = Model::new(cfg, 3).unwrap();
    let data = generate(TaskKind::Reverse, 2, 4, cfg.vocab, 5).unwrap();
    let step = m.backward(&data).unwrap();

    let (mut checked, mut bad, mut worst) = (0usize, 0usize, 0.0f64);
    for i in 0..m.params().len() {
        let orig = m.params()[i].tensor.clone();
        for j in 0..orig.len() {
            let w = orig.data()[j];
            let eps = 1e-3f32 * w.abs().max(1.0);
            let (hi, lo) = (w + eps, w - eps);
            let mut probe = |v: f32| {
                let mut d = orig.data().to_vec();
                d[j] = v;
                m.set_param(i, Tensor::new(orig.shape().to_vec(), d).unwrap()).unwrap();
                m.loss(&data).unwrap()
            };
            let (lp, lm) = (probe(hi), probe(lo));
            let numeric = (lp - lm) / (hi as f64 - lo as f64);
            let analytic = step.grads[i].data()[j] as f64;
            let err = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            // Relative error; the 1e-6 floor only matters for vanishing gradients.
            if err > 1e-3 * scale + 1e-6 {
                bad += 1;
            }
            if scale > 1e-4 {
                worst = worst.max(err / scale);
            }
            checked += 1;
        }
        m.set_param(i, orig).unwrap();
    }

    // Shared gradient == sum of the unrolled twin's gradients over the copies.
    let twin = m.unroll();
    let tg = twin.backward(&data).unwrap();
    let mut twin_err = 0.0f64;
    for (i, p) in m.params().iter().enumerate() {
        let copies = m.unrolled_copies(i);
        for j in 0..p.tensor.len() {
            let sum: f64 = copies
                .iter()
                .map(|c| tg.grads[twin.param_index(c).unwrap()].data()[j] as f64)
                .sum();
            twin_err = twin_err.max((step.grads[i].data()[j] as f64 - sum).abs());
        }
    }

    verdict(
        "AC2",
        "gradients vs central differences and unrolled twin",
        bad == 0 && worst < 1e-3 && twin_err <= 1e-6,
        format!("{checked} weights, {bad} outside 1e-3, worst rel {worst:.2e}, twin max abs diff {twin_err:.2e}"),
        t.elapsed(),
        secs(30),
    );
}

// ---------------------------------------------------------------- AC3

/// Keeps the `n - floor(r n)` most important weights. Walks a descending sort;
/// ties keep the later (tensor, offset), mirroring "earliest is pruned first".
fn topk_oracle(importance: &[Vec<f64>], pruned: usize) -> Vec<Vec<bool>> {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (l, v) in importance.iter().enumerate() {
        for (o, x) in v.iter().enumerate() {
            all.push((*x, l, o));
        }
    }
    let n = all.len();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((b.1, b.2).cmp(&(a.1, a.2))));
    let mut keep: Vec<Vec<bool>> = importance.iter().map(|v| vec![false; v.len()]).collect();
    for &(_, l, o) in &all[..n - pruned] {
        keep[l][o] = true;
    }
    keep
}

#[test]
fn ac03_sparsity_count_law() {
    let _g = serial();
    let t = Instant::now();
    let cfg = ModelConfig {
        d_model: 16,
        d_ff: 32,
        ..ModelConfig::default()
    };
    let data = generate(TaskKind::Copy, 64, 6, cfg.vocab, 11).unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    for r in [0.30, 0.40, 0.50] {
        let mut m = Model::new(cfg, 7).unwrap();
        let n = m.prunable_count();
        ok &= n <= 10_000;
        let steps = 40;
        let sched = SparsitySchedule::new(0, steps, r, 10).unwrap();
        let tc = TrainConfig {
            steps,
            lr: 0.05,
            batch_size: 4,
            seed: 1,
        };
        let rep = train(&mut m, &data, &tc, Some(sched)).unwrap();
        let pruned = (r * n as f64 + 1e-9).floor() as usize;
        let nonzero: usize = m
            .prunable_indices()
            .iter()
            .map(|i| m.params()[*i].tensor.count_nonzero())
            .sum();
        let frac = nonzero as f64 / n as f64;
        // The final mask event coincides with the last step, so the reported
        // importance is exactly what the mask was ranked on.
        let oracle = topk_oracle(&rep.importance, pruned);
        let same = oracle == rep.mask.keep;
        ok &= nonzero == n - pruned && (frac - (1.0 - r)).abs() < 1.0 / n as f64 && same;
        details.push(format!("r={r}: {nonzero}/{n} nonzero (1-r={:.2}), oracle match {same}", 1.0 - r));
    }
    verdict(
        "AC3",
        "floor-rule sparsity and Top-(1-r) mask",
        ok,
        details.join(", "),
        t.elapsed(),
        secs(10),
    );
}

// ---------------------------------------------------------------- AC4

#[test]
fn ac04_ema_closed_form() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shapes = [vec![5, 7], vec![13], vec![3, 2, 4]];
    let rand_t = |rng: &mut ChaCha8Rng, s: &Vec<usize>| {
        let n: usize = s.iter().product();
        Tensor::new(s.clone(), (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap()
    };
    let w0: Vec<Tensor> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
    let mut state = init_importance(&w0.iter().collect::<Vec<_>>());
    let steps = 100usize;
    let mut history: Vec<(Vec<Tensor>, Vec<Tensor>)> = Vec::new();
    for _ in 0..steps {
        let w: Vec<Tensor> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
        let g: Vec<Tensor> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
        state = update_importance(&state, &w.iter().collect::<Vec<_>>(), &g.iter().collect::<Vec<_>>()).unwrap();
        history.push((w, g));
    }

    // I_T = a^T I_0 + (1 - a) sum_t a^(T - t) (w_t g_t)^2, with I_0 = |w_0|.
    let a = 0.99f64;
    let mut worst = 0.0f64;
    for (l, s) in shapes.iter().enumerate() {
        let n: usize = s.iter().product();
        for o in 0..n {
            let mut expect = a.powi(steps as i32) * (w0[l].data()[o] as f64).abs();
            for (t_i, (w, g)) in history.iter().enumerate() {
                let x = w[l].data()[o] as f64 * g[l].data()[o] as f64;
                expect += (1.0 - a) * a.powi((steps - 1 - t_i) as i32) * x * x;
            }
            let got = state.importance[l][o];
            worst = worst.max((got - expect).abs() / expect.abs().max(f64::MIN_POSITIVE));
        }
    }
    verdict(
        "AC4",
        "100-step importance EMA vs closed form",
        worst <= 1e-6 && state.step == steps as u64,
        format!("max relative error {worst:.2e}"),
        t.elapsed(),
        None,
    );
}

// ---------------------------------------------------------------- AC5

#[test]
fn ac05_quantizer_laws() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 200_000;
    let (mut range, mut odd, mut recon, mut fixed) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..n {
        let scale = 10f32.powf(rng.random_range(-4.0f32..2.0));
        let p = QuantParams::new(scale).unwrap();
        // Mostly in range, some far beyond the clip point.
        let v = rng.random_range(-160.0f32..160.0) * scale;
        let q = p.quantize_value(v);
        if (q as i32).abs() > 127 {
            range += 1;
        }
        if p.quantize_value(-v) != -q {
            odd += 1;
        }
        if v.abs() <= 127.0 * scale {
            let err = (v as f64 - p.dequantize_value(q) as f64).abs();
            // Half a step, plus the rounding of the f32 product s * q.
            let bound = 0.5 * scale as f64 + f32::EPSILON as f64 * v.abs() as f64;
            if err > bound {
                recon += 1;
            }
        }
        let k: i8 = rng.random_range(-127..=127);
        if p.quantize_value(p.dequantize_value(k)) != k {
            fixed += 1;
        }
    }
    verdict(
        "AC5",
        "range, odd symmetry, s/2 bound, fixed points",
        range + odd + recon + fixed == 0,
        format!("{n} values; violations: range {range}, symmetry {odd}, bound {recon}, fixed {fixed}"),
        t.elapsed(),
        secs(5),
    );
}

// ---------------------------------------------------------------- AC6

/// Exhaustive KL search written from the definition, independent of the library.
/// Returns the threshold in magnitude bins.
fn kl_oracle(counts: &[u64], mode: HistMode) -> usize {
    let (half, levels, first) = match mode {
        HistMode::Absolute => (counts.len(), 128, 128),
        HistMode::Real => (counts.len() / 2, 256, 128),
    };
    let mut best = (f64::INFINITY, half);
    for i in first..=half {
        let range = match mode {
            HistMode::Absolute => 0..i,
            HistMode::Real => half - i..half + i,
        };
        let width = range.len();
        let raw: Vec<f64> = counts[range.clone()].iter().map(|c| *c as f64).collect();
        let mut p = raw.clone();
        p[0] += counts[..range.start].iter().sum::<u64>() as f64;
        p[width - 1] += counts[range.end..].iter().sum::<u64>() as f64;
        // Level of each bin, laid out from the group boundaries.
        let mut level = vec![0usize; width];
        for g in 0..levels {
            level[g * width / levels..(g + 1) * width / levels].fill(g);
        }
        let level_of = |j: usize| level[j];
        let mut mass = vec![0.0; levels];
        let mut support = vec![0usize; levels];
        for j in 0..width {
            let g = level_of(j);
            mass[g] += raw[j];
            if p[j] > 0.0 {
                support[g] += 1;
            }
        }
        let q: Vec<f64> = (0..width)
            .map(|j| {
                let g = level_of(j);
                if p[j] > 0.0 {
                    mass[g] / support[g] as f64
                } else {
                    0.0
                }
            })
            .collect();
        let (ps, qs): (f64, f64) = (p.iter().sum(), q.iter().sum());
        let mut kl = 0.0;
        for j in 0..width {
            if p[j] > 0.0 {
                kl += if q[j] > 0.0 {
                    (p[j] / ps) * ((p[j] / ps) / (q[j] / qs)).ln()
                } else {
                    f64::INFINITY
                };
            }
        }
        // Strictly smaller only, so ties keep the smaller threshold.
        if i == first || kl < best.0 {
            best = (kl, i);
        }
    }
    best.1
}

fn random_hist(rng: &mut ChaCha8Rng, mode: HistMode) -> CalibHistogram {
    let bins = mode.default_bins();
    let max_abs = rng.random_range(0.5f32..20.0);
    let mut h = CalibHistogram::with_range(mode, max_abs).unwrap();
    let spread = max_abs * rng.random_range(0.02f32..0.6);
    let shift = if mode == HistMode::Real { rng.random_range(-0.3f32..0.3) * spread } else { 0.0 };
    let normal = Normal::new(shift, spread).unwrap();
    let n = rng.random_range(2_000..40_000);
    let mut values: Vec<f32> = (0..n).map(|_| normal.sample(rng)).collect();
    // A few outliers stretch the tail.
    for _ in 0..rng.random_range(0..20) {
        values.push(rng.random_range(-max_abs..max_abs));
    }
    if mode == HistMode::Absolute {
        values.iter_mut().for_each(|v| *v = v.abs());
    }
    h.accumulate(&values);
    assert_eq!(h.bin_count(), bins);
    h
}

#[test]
fn ac06_kl_calibration() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let per_mode = 50;
    let mut agree = [0usize; 2];
    let mut scale_ok = true;
    for (m, mode) in [HistMode::Absolute, HistMode::Real].into_iter().enumerate() {
        for _ in 0..per_mode {
            let h = random_hist(&mut rng, mode);
            let r = search_threshold(&h).unwrap();
            if r.candidate_bins == kl_oracle(h.counts(), mode) {
                agree[m] += 1;
            }
            scale_ok &= r.params.scale() == r.threshold / 127.0;
        }
    }
    let ratio = REAL_BINS / ABSOLUTE_BINS;
    let widths_equal = {
        let a = CalibHistogram::with_range(HistMode::Absolute, 3.0).unwrap();
        let b = CalibHistogram::with_range(HistMode::Real, 3.0).unwrap();
        a.bin_width() == b.bin_width() && b.bin_count() == 2 * a.bin_count()
    };
    verdict(
        "AC6",
        "KL threshold vs exhaustive oracle, Real = 2x bins, scale = T/127",
        agree == [per_mode; 2] && ratio == 2 && widths_equal && scale_ok,
        format!(
            "oracle agreement absolute {}/{per_mode}, real {}/{per_mode}; bins {ABSOLUTE_BINS}/{REAL_BINS}; scale law {scale_ok}",
            agree[0], agree[1]
        ),
        t.elapsed(),
        secs(30),
    );
}

// ---------------------------------------------------------------- AC7

/// Reconstruction MSE computed directly from the quantizer definition.
fn mse_at(w: &[f32], s: f64) -> f64 {
    w.iter()
        .map(|x| {
            let x = *x as f64;
            let q = (x / s).clamp(-127.0, 127.0).round();
            (x - s * q).powi(2)
        })
        .sum::<f64>()
        / w.len() as f64
}

#[test]
fn ac07_admm_scale_search() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let trials = 50;
    let mut not_worse = 0;
    for _ in 0..trials {
        let n = rng.random_range(16..2048);
        let sd = rng.random_range(0.01f32..2.0);
        let normal = Normal::new(0.0, sd).unwrap();
        let w = Tensor::new(vec![n], (0..n).map(|_| normal.sample(&mut rng)).collect()).unwrap();
        let s0 = maxabs_scale(&w).unwrap() as f64;
        let (p, _) = optimize_weight_scale(&w).unwrap();
        if mse_at(w.data(), p.scale() as f64) <= mse_at(w.data(), s0) {
            not_worse += 1;
        }
    }

    // Grid over [s0/2, 2 s0] with 10^4 points.
    let grid_trials = 50;
    let points = 10_000;
    let mut matched = 0;
    let mut gap = 0.0f64;
    for _ in 0..grid_trials {
        let w = Tensor::new(vec![8], (0..8).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect())
            .unwrap();
        let s0 = maxabs_scale(&w).unwrap() as f64;
        let (lo, hi) = (0.5 * s0, 2.0 * s0);
        let step = (hi - lo) / (points - 1) as f64;
        let (mut best_s, mut best_mse) = (lo, f64::INFINITY);
        for k in 0..points {
            let s = lo + k as f64 * step;
            let e = mse_at(w.data(), s);
            if e < best_mse {
                best_mse = e;
                best_s = s;
            }
        }
        let (p, _) = optimize_weight_scale(&w).unwrap();
        let s = p.scale() as f64;
        if (s - best_s).abs() <= step {
            matched += 1;
        }
        gap = gap.max(mse_at(w.data(), s) / best_mse);
    }

    verdict(
        "AC7",
        "ADMM never worse than max-abs; 8-element scale equals grid argmin",
        not_worse == trials && matched == grid_trials,
        format!(
            "not worse {not_worse}/{trials}; grid match {matched}/{grid_trials}, worst MSE ratio to grid optimum {gap:.2}"
        ),
        t.elapsed(),
        secs(30),
    );
}

// ---------------------------------------------------------------- AC8

fn quick_pipeline(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_text(
        "pretrain_steps=100\nfinetune_steps=60\nsparsity_end=40\nsparsity_interval=10\n\
         train_examples=128\neval_examples=50\ncalib_batches=2\ncalib_batch_size=4\n",
    )
    .unwrap();
    cfg.work_dir = dir.to_path_buf();
    cfg
}

#[test]
fn ac08_amp_selection() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let trials = 2_000;
    let mut agree = 0;
    let mut with_ties = 0;
    for _ in 0..trials {
        let n = rng.random_range(1..24);
        // Few distinct values so ties are common; ids arrive in shuffled order.
        let distinct = rng.random_range(1..6);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let costs: Vec<LayerCost> = order
            .iter()
            .map(|i| LayerCost {
                layer_id: format!("l{i:02}"),
                cost: rng.random_range(0..distinct) as f64 * 0.25,
                sample_count: 1,
            })
            .collect();
        let excluded: Vec<String> = costs.iter().filter(|_| rng.random_bool(0.15)).map(|c| c.layer_id.clone()).collect();
        let eligible: Vec<&LayerCost> = costs.iter().filter(|c| !excluded.contains(&c.layer_id)).collect();
        let k = rng.random_range(0..=eligible.len());
        let distinct_costs: BTreeSet<u64> = eligible.iter().map(|c| c.cost.to_bits()).collect();
        if distinct_costs.len() < eligible.len() {
            with_ties += 1;
        }

        // Oracle: rank by (cost desc, id asc) via a stable sort on the ids first.
        let mut oracle: Vec<&LayerCost> = eligible.clone();
        oracle.sort_by(|a, b| a.layer_id.cmp(&b.layer_id));
        oracle.sort_by(|a, b| b.cost.partial_cmp(&a.cost).unwrap());
        let want: BTreeSet<&str> = oracle[..k].iter().map(|c| c.layer_id.as_str()).collect();

        let plan = select_fallback(&costs, k, &excluded).unwrap();
        let got: BTreeSet<&str> = plan
            .entries
            .iter()
            .filter(|e| e.precision == Precision::Float32 && !excluded.contains(&e.layer_id))
            .map(|e| e.layer_id.as_str())
            .collect();
        let excluded_float = excluded
            .iter()
            .all(|x| plan.precision_of(x) == Some(Precision::Float32));
        if got == want && excluded_float {
            agree += 1;
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_pipeline(dir.path());
    cfg.amp_k = 3;
    let out = run_pipeline(&cfg).unwrap();
    let rep = &out.report;
    let pipeline_ok = rep.fallback_layers.len() == 3
        && rep.excluded == ["predict"]
        && !rep.fallback_layers.iter().any(|l| l == "predict")
        && out.model.chunk("predict.w").unwrap().encoding() == Encoding::DenseF32;

    verdict(
        "AC8",
        "AMP Top-K vs sort oracle; pipeline AMP(3) row",
        agree == trials && pipeline_ok,
        format!(
            "{agree}/{trials} random plans match ({with_ties} with ties); pipeline fallbacks {:?}, excluded {:?}",
            rep.fallback_layers, rep.excluded
        ),
        t.elapsed(),
        secs(10),
    );
}

// ---------------------------------------------------------------- AC9

/// Closed-form file size from chunk metadata only.
fn closed_form_size(cm: &CompressedModel) -> usize {
    let mut total = 12 + 16 * cm.chunks.len();
    for c in &cm.chunks {
        let n: usize = c.shape().iter().product();
        let payload = match &c.payload {
            Payload::DenseF32(_) => 4 * n,
            Payload::DenseI8 { .. } => 4 + n,
            Payload::SparseI8 { .. } => 4 + n.div_ceil(8) + c.kept(),
            Payload::Text(s) => s.len(),
        };
        total += 2 + c.name.len() + 1 + 1 + 4 * c.shape().len() + payload;
    }
    total
}

#[test]
fn ac09_size_accounting() {
    let _g = serial();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut crs = Vec::new();
    let mut sizes_ok = true;
    for (i, r) in [0.3, 0.4, 0.5].into_iter().enumerate() {
        let mut cfg = quick_pipeline(&dir.path().join(i.to_string()));
        cfg.sparsity = r;
        cfg.strategy = QuantStrategy::Kl;
        cfg.amp_k = 0;
        let out = run_pipeline(&cfg).unwrap();
        let on_disk = fs::metadata(&out.model_path).unwrap().len() as usize;
        let cm = CompressedModel::read(&out.model_path).unwrap();
        sizes_ok &= on_disk == closed_form_size(&cm) && on_disk == out.report.size.total_bytes;
        crs.push(out.report.size.compression_ratio);
    }
    let monotone = crs.windows(2).all(|w| w[1] > w[0]);
    verdict(
        "AC9",
        "closed-form sizes, CR >= 6 at 50%, monotone over 30/40/50%",
        sizes_ok && crs[2] >= 6.0 && monotone,
        format!("sizes exact {sizes_ok}; CR at 30/40/50% = {:.3}/{:.3}/{:.3}", crs[0], crs[1], crs[2]),
        t.elapsed(),
        secs(10),
    );
}

// ---------------------------------------------------------------- AC10

#[test]
fn ac10_determinism_and_fidelity() {
    let _g = serial();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: u64| {
        let cfg = PipelineConfig {
            seed,
            work_dir: dir.path().join(name),
            ..PipelineConfig::default()
        };
        run_pipeline(&cfg).unwrap()
    };
    let a = run("a", 0);
    let b = run("b", 0);
    let identical = fs::read(&a.model_path).unwrap() == fs::read(&b.model_path).unwrap();

    let mut drops = vec![a.report.eval.accuracy_drop_pp()];
    for seed in 1..5 {
        drops.push(run(&format!("s{seed}"), seed).report.eval.accuracy_drop_pp());
    }
    let worst = drops.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    verdict(
        "AC10",
        "byte-identical reruns, int8 accuracy drop <= 2pp over 5 seeds",
        identical && worst <= 2.0,
        format!(
            "identical {identical}; drops (pp) {:?}; float acc seed0 {:.3}",
            drops.iter().map(|d| (d * 100.0).round() / 100.0).collect::<Vec<_>>(),
            a.report.eval.float_accuracy.sequence
        ),
        t.elapsed(),
        Some(Duration::from_secs(600)),
    );
}
