//! Acceptance suite: one line per criterion, non-zero exit on any failure.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::time::Instant;

use plotfuse_core::align::temporal_align;
use plotfuse_core::autograd::Tape;
use plotfuse_core::backbone::BackboneKind;
use plotfuse_core::data::*;
use plotfuse_core::experiment::*;
use plotfuse_core::metrics::{aggregate, auc_pr_buffered, point_adjusted_f1, vus_pr, MetricReport};
use plotfuse_core::nn::ParamGroup;
use plotfuse_core::prelude::*;
use plotfuse_core::raster::rasterize;
use plotfuse_core::tokenizer::{revin_fit_transform, revin_invert};
use plotfuse_core::train::{train_task, NullClock, Samples};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| normal(rng))
}

fn revin_roundtrip() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (b, l, c) = (rng.random_range(1..=8), rng.random_range(2..=128), rng.random_range(1..=16));
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let offset = rng.random_range(-100.0..100.0);
        let x = Tensor::from_fn(&[b, l, c], |_| offset + scale * normal(&mut rng));
        let (xn, stats) = revin_fit_transform(&x).unwrap();
        worst = worst.max(revin_invert(&xn, &stats).unwrap().max_abs_diff(&x));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(worst < 1e-5 && secs < 10.0, format!("max error {worst:.3e}, {secs:.2} s"))
}

fn align_once(tokens: &Tensor, q: usize, r: usize, target: usize) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(tokens.clone());
    let out = temporal_align(&mut tape, v, q, r, target, &AlignConfig::default()).unwrap();
    tape.value(out).clone()
}

fn alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();
    for case in 0..200 {
        let (q, r) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (b, d) = (rng.random_range(1..=3), rng.random_range(1..=8));
        let target = rng.random_range(1..=32);

        let row = random_tensor(&mut rng, &[b, r, d]);
        if align_once(&row, 1, r, r) != row {
            failures.push(format!("identity case {case}"));
        }

        let fill: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let constant = Tensor::from_fn(&[b, q * r, d], |i| fill[i % d]);
        let out = align_once(&constant, q, r, target);
        if out.data().iter().enumerate().any(|(i, &v)| v != fill[i % d]) {
            failures.push(format!("constant case {case}"));
        }

        let grid = random_tensor(&mut rng, &[b, q * r, d]);
        let mut perm: Vec<usize> = (0..q).collect();
        perm.sort_by_key(|_| rng.random::<u32>());
        let shuffled = Tensor::from_fn(&[b, q * r, d], |i| {
            let (bi, rest) = (i / (q * r * d), i % (q * r * d));
            let (row, col, k) = (rest / (r * d), (rest / d) % r, rest % d);
            grid.at(&[bi, perm[row] * r + col, k])
        });
        if align_once(&grid, q, r, target) != align_once(&shuffled, q, r, target) {
            failures.push(format!("row permutation case {case}"));
        }
    }
    outcome(failures.is_empty(), if failures.is_empty() { "200 grids exact".into() } else { failures.join(", ") })
}

fn random_model_config(rng: &mut ChaCha8Rng, task: Task, vision: bool) -> ModelConfig {
    let l = rng.random_range(8..=32);
    let c = rng.random_range(1..=4);
    let r = rng.random_range(1..=l.min(8));
    let d = [4, 8][rng.random_range(0..2)];
    let side = [16, 32][rng.random_range(0..2)];
    let depth = rng.random_range(0..=2);
    ModelConfig {
        task: TaskConfig {
            task,
            n_classes: rng.random_range(2..=4),
            horizon: rng.random_range(1..=8),
            ..TaskConfig::default()
        },
        seq_len: l,
        channels: c,
        render: RenderConfig { height: side, width: side, ..RenderConfig::default() },
        tokenizer: TokenizerConfig { r, patch_mode: ModelConfig::patch_mode_for(task), d },
        vision: vision.then(|| VisionEncoderSpec {
            kind: [EncoderKind::ToyVit, EncoderKind::ToyConv][rng.random_range(0..2)],
            pixel_patch: 8,
            width: 8,
            depth: 1,
            heads: 2,
            ..VisionEncoderSpec::default()
        }),
        align: AlignConfig::default(),
        fusion: FusionPlan::default(),
        backbone: BackboneSpec {
            kind: BackboneKind::Transformer,
            width: d,
            depth,
            heads: 2,
            max_positions: 64,
            ..BackboneSpec::default()
        },
        policy: TuningPolicy::Default,
        seed: rng.random(),
    }
}

const TASKS: [Task; 3] = [Task::Classification, Task::AnomalyDetection, Task::Forecasting];

fn zero_visual() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let cfg = random_model_config(&mut rng, TASKS[i % 3], true);
        let mut fused = Model::new(cfg.clone()).unwrap();
        fused.zero_plot_projection();
        let plain = Model::new(ModelConfig { vision: None, ..cfg.clone() }).unwrap();
        let b = rng.random_range(1..=3);
        let x = random_tensor(&mut rng, &[b, cfg.seq_len, cfg.channels]);
        let a = fused.predict(&x, None, 8).unwrap();
        let b = plain.predict(&x, None, 8).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    outcome(worst <= 1e-6, format!("max difference {worst:.3e} over 50 configs"))
}

fn classification_samples(rng: &mut ChaCha8Rng, n: usize, l: usize, c: usize) -> Samples {
    let x = random_tensor(rng, &[n, l, c]);
    let labels = (0..n).map(|i| usize::from(x.at(&[i, 0, 0]) > 0.0)).collect();
    Samples { x, labels: BatchLabels::Classes(labels), visual: None }
}

fn tuning_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut problems = Vec::new();
    for policy in [TuningPolicy::Default, TuningPolicy::Freeze] {
        let mut cfg = random_model_config(&mut rng, Task::Classification, true);
        cfg.backbone.depth = 2;
        cfg.task.n_classes = 2;
        let mut model = Model::new(cfg.clone()).unwrap();
        let mut samples = classification_samples(&mut rng, 64, cfg.seq_len, cfg.channels);
        samples.visual = model.prepare_visual(&samples.x, 64).unwrap();
        let before = model.store.clone();
        let tc = TrainConfig {
            max_epochs: 25,
            patience: 1000,
            batch_size: 16,
            lr_max: 1e-2,
            policy,
            ..TrainConfig::default()
        };
        let log = train_task(&mut model, &samples, None, &tc, 0, &NullClock).unwrap();
        if log.step_losses.len() != 100 {
            problems.push(format!("{} steps instead of 100", log.step_losses.len()));
        }
        for ((_, p0), (_, p1)) in before.iter().zip(model.store.iter()) {
            let same = p0.value.data().iter().zip(p1.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            let should_change = match policy {
                TuningPolicy::Freeze => matches!(p0.group, ParamGroup::Head | ParamGroup::Projection),
                _ => matches!(
                    p0.group,
                    ParamGroup::Head | ParamGroup::Projection | ParamGroup::LayerNorm | ParamGroup::PositionalEmbedding
                ),
            };
            if same == should_change {
                problems.push(format!(
                    "{}: {} {} under {}",
                    p0.name,
                    p0.group.as_str(),
                    if same { "unchanged" } else { "changed" },
                    policy.as_str()
                ));
            }
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() { "default and freeze respected over 100 steps".into() } else { problems.join("; ") },
    )
}

fn task_loss(model: &Model, x: &Tensor, labels: &BatchLabels) -> (f64, BTreeMap<String, Tensor>) {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, x, None).unwrap();
    let loss = model.loss(&mut tape, &out, x, labels).unwrap();
    let value = tape.value(loss).item();
    let grads = tape.backward(loss).params();
    let named = grads.into_iter().map(|(id, g)| (model.store.get(id).name.clone(), g)).collect();
    (value, named)
}

fn gradient_checks() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut covered = BTreeMap::<&str, usize>::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        for task in TASKS {
            let mut cfg = random_model_config(&mut rng, task, true);
            cfg.vision.as_mut().unwrap().kind = EncoderKind::ToyVit;
            let mut model = Model::new(cfg.clone()).unwrap();
            let b = 2;
            let x = random_tensor(&mut rng, &[b, cfg.seq_len, cfg.channels]);
            let labels = match task {
                Task::Classification => BatchLabels::Classes((0..b).map(|i| i % cfg.task.n_classes).collect()),
                Task::AnomalyDetection => BatchLabels::None,
                Task::Forecasting => BatchLabels::Future(random_tensor(&mut rng, &[b, cfg.task.horizon, cfg.channels])),
            };
            let (_, grads) = task_loss(&model, &x, &labels);
            let ids: Vec<_> = model
                .store
                .iter()
                .filter(|(_, p)| {
                    p.name.starts_with("vision.proj")
                        || p.name.starts_with("tokenizer.proj")
                        || p.name.starts_with("head.")
                })
                .map(|(id, _)| id)
                .collect();
            for id in ids {
                let name = model.store.get(id).name.clone();
                let analytic = grads[&name].clone();
                let mut numeric = vec![0.0; analytic.numel()];
                let h = 1e-5;
                for (k, slot) in numeric.iter_mut().enumerate() {
                    let orig = model.store.get(id).value.data()[k];
                    model.store.get_mut(id).value.data_mut()[k] = orig + h;
                    let up = task_loss(&model, &x, &labels).0;
                    model.store.get_mut(id).value.data_mut()[k] = orig - h;
                    let down = task_loss(&model, &x, &labels).0;
                    model.store.get_mut(id).value.data_mut()[k] = orig;
                    *slot = (up - down) / (2.0 * h);
                }
                let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
                let norm_a: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
                let norm_n: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
                let rel = diff / (norm_a + norm_n).max(1e-12);
                worst = worst.max(rel);
                let part = if name.starts_with("vision") {
                    "plot projection"
                } else if name.starts_with("tokenizer") {
                    "token projection"
                } else {
                    task.as_str()
                };
                *covered.entry(part).or_default() += 1;
            }
        }
    }
    outcome(
        worst <= 1e-4 && covered.len() == 5,
        format!("worst relative error {worst:.3e}; tensors checked {covered:?}"),
    )
}

fn motif_instances(seed: u64) -> Vec<SeriesInstance> {
    make_synthetic(&SyntheticSpec {
        kind: SyntheticKind::ClassMotifs {
            n_instances: 200,
            n_classes: 2,
            length: 64,
            channels: 2,
            base_freqs: vec![1.0, 2.0],
            snr_db: 10.0,
        },
        seed,
        assert_separable: true,
    })
    .unwrap()
    .instances
}

fn toy_vision() -> VisionEncoderSpec {
    VisionEncoderSpec {
        kind: EncoderKind::ToyVit,
        pixel_patch: 8,
        width: 16,
        depth: 1,
        heads: 2,
        ..VisionEncoderSpec::default()
    }
}

fn toy_config(
    task: TaskConfig,
    seq_len: usize,
    channels: usize,
    r: usize,
    vision: bool,
    policy: TuningPolicy,
    seed: u64,
) -> ModelConfig {
    ModelConfig {
        tokenizer: TokenizerConfig { r, patch_mode: ModelConfig::patch_mode_for(task.task), d: 16 },
        task,
        seq_len,
        channels,
        render: RenderConfig { height: 32, width: 64, ..RenderConfig::default() },
        vision: vision.then(toy_vision),
        align: AlignConfig::default(),
        fusion: FusionPlan::default(),
        backbone: BackboneSpec { width: 16, depth: 2, heads: 2, max_positions: 128, ..BackboneSpec::default() },
        policy,
        seed,
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Image columns of the toy render (64 px wide, 8 px patches).
const VISUAL_COLUMNS: usize = 8;

fn classify(seed: u64, r: usize, vision: bool) -> f64 {
    let cfg = toy_config(
        TaskConfig { task: Task::Classification, n_classes: 2, ..TaskConfig::default() },
        64,
        2,
        r,
        vision,
        TuningPolicy::TuneAll,
        seed,
    );
    let mut model = Model::new(cfg).unwrap();
    let tc = TrainConfig {
        batch_size: 32,
        lr_max: 3e-3,
        policy: TuningPolicy::TuneAll,
        ..TrainConfig::for_task(Task::Classification)
    };
    run_classification(
        &mut model,
        &motif_instances(100 + seed),
        None,
        &motif_instances(200 + seed),
        &tc,
        seed,
        &NullClock,
    )
    .unwrap()
    .accuracy
}

/// Token count for patch multiplier `m`: patches of `m·L/r_v` steps.
fn tokens_for_multiplier(m: usize) -> usize {
    VISUAL_COLUMNS.div_ceil(m)
}

struct Sweep {
    /// Accuracy per token count, vision on/off, per seed.
    runs: BTreeMap<(usize, bool), Vec<f64>>,
    seconds: BTreeMap<(usize, bool), f64>,
}

impl Sweep {
    fn run() -> Self {
        let mut runs = BTreeMap::new();
        let mut seconds = BTreeMap::new();
        for m in 1..=10 {
            let r = tokens_for_multiplier(m);
            for vision in [true, false] {
                if let Entry::Vacant(e) = runs.entry((r, vision)) {
                    let t = Instant::now();
                    e.insert(SEEDS.iter().map(|&s| classify(s, r, vision)).collect());
                    seconds.insert((r, vision), t.elapsed().as_secs_f64());
                }
            }
        }
        Self { runs, seconds }
    }

    fn report(&self, vision: bool) -> MetricReport {
        let per_m: Vec<MetricReport> = (1..=10)
            .map(|m| {
                let accs = &self.runs[&(tokens_for_multiplier(m), vision)];
                let per_seed: Vec<(u64, f64)> = SEEDS.iter().copied().zip(accs.iter().copied()).collect();
                let axes = BTreeMap::from([("patch_multiplier".to_string(), m.to_string())]);
                MetricReport::from_seeds("classification", "accuracy", axes, &per_seed)
            })
            .collect();
        aggregate(&per_m, "patch_multiplier").unwrap()
    }
}

fn classification(sweep: &Sweep) -> Outcome {
    let key = (tokens_for_multiplier(1), true);
    let accs = &sweep.runs[&key];
    let secs = sweep.seconds[&key];
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    outcome(mean >= 0.95 && secs < 600.0, format!("mean accuracy {mean:.4} over seeds {accs:?}, {secs:.0} s"))
}

fn patch_robustness(sweep: &Sweep) -> Outcome {
    let with = sweep.report(true).std.unwrap();
    let without = sweep.report(false).std.unwrap();
    outcome(with <= without, format!("std with vision {with:.5}, without {without:.5}"))
}

fn anomaly_series(seed: u64, n_segments: usize, n_spikes: usize, length: usize) -> Vec<SeriesInstance> {
    make_synthetic(&SyntheticSpec {
        kind: SyntheticKind::AnomalyInjected {
            length,
            channels: 3,
            period: 24.0,
            n_segments,
            segment_len: 20,
            shift_height: 3.0,
            n_spikes,
            spike_height: 5.0,
            snr_db: 20.0,
        },
        seed,
        assert_separable: false,
    })
    .unwrap()
    .instances
}

fn anomaly_detection() -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let cfg = toy_config(
            TaskConfig { task: Task::AnomalyDetection, ..TaskConfig::default() },
            64,
            3,
            8,
            true,
            TuningPolicy::Default,
            seed,
        );
        let mut model = Model::new(cfg).unwrap();
        let tc = TrainConfig { batch_size: 32, lr_max: 3e-3, ..TrainConfig::for_task(Task::AnomalyDetection) };
        let train = anomaly_series(300 + seed, 0, 0, 3000);
        let test = anomaly_series(400 + seed, 8, 10, 2000);
        let res = run_anomaly(&mut model, &train, &test, &tc, 8, 1, seed, &NullClock).unwrap();
        let (pa, vus, shuffled) = (res.pa_f1.unwrap(), res.vus_pr.unwrap(), res.vus_pr_shuffled.unwrap());
        pass &= pa >= 0.8 && vus > shuffled;
        lines.push(format!("seed {seed}: F {pa:.3}, VUS {vus:.3} vs {shuffled:.3}"));
    }
    outcome(pass, lines.join("; "))
}

fn seasonal(seed: u64, pure_sine: bool) -> SeriesInstance {
    let kind = if pure_sine {
        SyntheticKind::SeasonalTrend {
            length: 3000,
            channels: 2,
            periods: vec![30.0],
            amplitudes: vec![1.0],
            trend_slope: 0.0,
            snr_db: f64::INFINITY,
        }
    } else {
        SyntheticKind::SeasonalTrend {
            length: 3000,
            channels: 2,
            periods: vec![24.0, 96.0],
            amplitudes: vec![1.0, 0.5],
            trend_slope: 0.001,
            snr_db: 20.0,
        }
    };
    make_synthetic(&SyntheticSpec { kind, seed, assert_separable: false }).unwrap().instances.remove(0)
}

fn train_forecaster(seed: u64, series: &SeriesInstance) -> (Model, ForecastResult, SeriesInstance) {
    let borders = chrono_split(series.len(), 0.7, 0.1).unwrap();
    let [train, val, test] = split_instance(series, &borders, 96);
    let cfg = toy_config(
        TaskConfig { task: Task::Forecasting, horizon: 24, ..TaskConfig::default() },
        96,
        2,
        12,
        true,
        TuningPolicy::Default,
        seed,
    );
    let mut model = Model::new(cfg).unwrap();
    let tc = TrainConfig { batch_size: 32, lr_max: 3e-3, ..TrainConfig::for_task(Task::Forecasting) };
    let res = run_forecast(&mut model, &[train], Some(&[val]), core::slice::from_ref(&test), &tc, 4, seed, &NullClock)
        .unwrap();
    (model, res, test)
}

fn forecasting() -> Outcome {
    let (mut mse, mut pers) = (0.0, 0.0);
    for seed in SEEDS {
        let (_, res, _) = train_forecaster(seed, &seasonal(500 + seed, false));
        mse += res.mse / SEEDS.len() as f64;
        pers += res.persistence_mse / SEEDS.len() as f64;
    }
    outcome(mse <= 0.5 * pers, format!("mean MSE {mse:.4}, persistence {pers:.4}, ratio {:.3}", mse / pers))
}

fn autoregressive() -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let (model, _, test) = train_forecaster(seed, &seasonal(500 + seed, true));
        let errs = autoregressive_errors(&model, &test, &[24, 48, 96], 8).unwrap();
        let e: Vec<f64> = errs.values().copied().collect();
        pass &= e.windows(2).all(|w| w[0] <= w[1]);
        lines.push(format!("seed {seed}: {:.3e} {:.3e} {:.3e}", e[0], e[1], e[2]));
    }
    outcome(pass, lines.join("; "))
}

fn brute_pa_f1(scores: &[f64], labels: &[u8]) -> Option<f64> {
    if !labels.contains(&1) {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(f64::INFINITY);
    thresholds.push(f64::NEG_INFINITY);
    let mut best: f64 = 0.0;
    for &th in &thresholds {
        let mut pred: Vec<bool> = scores.iter().map(|&s| s >= th).collect();
        let mut i = 0;
        while i < labels.len() {
            if labels[i] == 1 {
                let start = i;
                while i < labels.len() && labels[i] == 1 {
                    i += 1;
                }
                if pred[start..i].iter().any(|&p| p) {
                    pred[start..i].iter_mut().for_each(|p| *p = true);
                }
            } else {
                i += 1;
            }
        }
        let tp = (0..labels.len()).filter(|&i| pred[i] && labels[i] == 1).count();
        let fp = (0..labels.len()).filter(|&i| pred[i] && labels[i] == 0).count();
        let fn_ = (0..labels.len()).filter(|&i| !pred[i] && labels[i] == 1).count();
        let f = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        best = best.max(f);
    }
    Some(best)
}

fn brute_weights(labels: &[u8], buffer: usize) -> Vec<f64> {
    (0..labels.len())
        .map(|i| {
            let dist = (0..labels.len()).filter(|&j| labels[j] == 1).map(|j| i.abs_diff(j)).min();
            match dist {
                Some(0) => 1.0,
                Some(k) if k <= buffer => 1.0 - k as f64 / (buffer + 1) as f64,
                _ => 0.0,
            }
        })
        .collect()
}

fn brute_auc(scores: &[f64], labels: &[u8], buffer: usize) -> f64 {
    let w = brute_weights(labels, buffer);
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = vec![(0.0, 1.0)];
    for th in thresholds {
        let flagged: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= th).collect();
        let precision = flagged.iter().map(|&i| w[i]).sum::<f64>() / flagged.len() as f64;
        let recall = flagged.iter().filter(|&&i| labels[i] == 1).count() as f64 / n_pos;
        points.push((recall, precision));
    }
    points.windows(2).map(|p| (p[1].0 - p[0].0) * (p[1].1 + p[0].1) / 2.0).sum()
}

fn brute_vus(scores: &[f64], labels: &[u8], max_buffer: usize) -> f64 {
    (0..=max_buffer).map(|b| brute_auc(scores, labels, b)).sum::<f64>() / (max_buffer + 1) as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut problems = Vec::new();
    let mut worst_vus: f64 = 0.0;
    for case in 0..500 {
        let n = rng.random_range(1..=200);
        let mut labels = vec![0u8; n];
        for _ in 0..rng.random_range(0..=4) {
            let start = rng.random_range(0..n);
            let len = rng.random_range(1..=20).min(n - start);
            labels[start..start + len].fill(1);
        }
        let levels = rng.random_range(2..=50);
        let scores: Vec<f64> = (0..n)
            .map(|i| rng.random_range(0..levels) as f64 / levels as f64 + 0.3 * labels[i] as f64 * rng.random::<f64>())
            .collect();
        let pa = point_adjusted_f1(&scores, &labels).unwrap().map(|b| b.f1);
        if pa != brute_pa_f1(&scores, &labels) {
            problems.push(format!("case {case}: F {pa:?} vs {:?}", brute_pa_f1(&scores, &labels)));
        }
        let max_buffer = rng.random_range(0..=10);
        match vus_pr(&scores, &labels, max_buffer).unwrap() {
            None if !labels.contains(&1) => {}
            Some(v) if labels.contains(&1) => {
                worst_vus = worst_vus.max((v - brute_vus(&scores, &labels, max_buffer)).abs());
                let v0 = vus_pr(&scores, &labels, 0).unwrap().unwrap();
                let auc = auc_pr_buffered(&scores, &labels, 0).unwrap().unwrap();
                if v0 != auc || (auc - brute_auc(&scores, &labels, 0)).abs() > 1e-9 {
                    problems.push(format!("case {case}: buffer-0 VUS {v0} vs AUC-PR {auc}"));
                }
            }
            other => problems.push(format!("case {case}: VUS {other:?} with positives = {}", labels.contains(&1))),
        }
    }
    if worst_vus > 1e-9 {
        problems.push(format!("VUS error {worst_vus:.3e}"));
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() { format!("500 cases, worst VUS error {worst_vus:.1e}") } else { problems.join("; ") },
    )
}

fn rasterizer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut problems = Vec::new();
    for case in 0..100 {
        let c = rng.random_range(2..=5);
        let l = rng.random_range(2..=96);
        let x = random_tensor(&mut rng, &[l, c]);
        let band = rng.random_range(8..=16);
        let cfg = RenderConfig {
            height: band * c,
            width: rng.random_range(16..=96),
            layout: if case % 2 == 0 { Layout::Horizontal } else { Layout::Grid },
            color_coding: case % 3 != 0,
            antialias: case % 4 != 0,
            line_width: rng.random_range(1..=2),
            ..RenderConfig::default()
        };
        let a = rasterize(&x, &cfg).unwrap();
        let again = rasterize(&x, &cfg).unwrap();
        let bits = |p: &RenderedPlot| p.pixels.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&a) != bits(&again) {
            problems.push(format!("case {case}: re-render differs"));
        }

        let offsets: Vec<f64> = (0..c).map(|_| rng.random_range(-10.0..10.0)).collect();
        let shifted = Tensor::from_fn(&[l, c], |i| x.data()[i] + offsets[i % c]);
        if bits(&rasterize(&shifted, &cfg).unwrap()) != bits(&a) {
            problems.push(format!("case {case}: shifted render differs"));
        }

        let swap_cfg = RenderConfig { layout: Layout::Horizontal, color_coding: false, ..cfg.clone() };
        let (i, j) = (0, rng.random_range(1..c));
        let swapped = Tensor::from_fn(&[l, c], |k| {
            let ch = match k % c {
                ch if ch == i => j,
                ch if ch == j => i,
                ch => ch,
            };
            x.data()[(k / c) * c + ch]
        });
        let p = rasterize(&x, &swap_cfg).unwrap().pixels;
        let s = rasterize(&swapped, &swap_cfg).unwrap().pixels;
        let w = swap_cfg.width;
        let band_rows = |img: &Tensor, ch: usize| -> Vec<u64> {
            (0..3)
                .flat_map(|col| (ch * band..(ch + 1) * band).flat_map(move |y| (0..w).map(move |xx| (col, y, xx))))
                .map(|(col, y, xx)| img.at(&[col, y, xx]).to_bits())
                .collect()
        };
        for ch in 0..c {
            let other = if ch == i {
                j
            } else if ch == j {
                i
            } else {
                ch
            };
            if band_rows(&p, ch) != band_rows(&s, other) {
                problems.push(format!("case {case}: band {ch} did not move to {other}"));
                break;
            }
        }
    }
    outcome(problems.is_empty(), if problems.is_empty() { "100 windows exact".into() } else { problems.join("; ") })
}

fn main() {
    let mut all_pass = true;
    let mut report = |n: usize, name: &str, o: Outcome| {
        all_pass &= o.pass;
        println!("criterion {n:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, "revin round trip", revin_roundtrip());
    report(2, "alignment identity and constancy", alignment());
    report(3, "zero visual equivalence", zero_visual());
    report(4, "selective tuning contract", tuning_contract());
    report(5, "gradient checks", gradient_checks());
    let sweep = Sweep::run();
    report(6, "synthetic classification", classification(&sweep));
    report(7, "synthetic anomaly detection", anomaly_detection());
    report(8, "synthetic forecasting", forecasting());
    report(9, "patch size robustness", patch_robustness(&sweep));
    report(10, "metric oracles", metric_oracles());
    report(11, "rasterizer invariances", rasterizer());
    report(12, "autoregressive error growth", autoregressive());
    if !all_pass {
        std::process::exit(1);
    }
}
