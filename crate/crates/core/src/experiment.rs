//! End-to-end task runs: build samples from series, train, and score.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{forecast_windows, sliding_windows, BatchLabels, SeriesInstance, WindowBatch};
use crate::error::{Error, Result};
use crate::heads::{anomaly_score, series_scores, Task};
use crate::metrics::{accuracy, default_max_buffer, mse_mae, point_adjusted_f1, vus_pr};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{forecast_autoregressive, train_task, Clock, RunLog, Samples, TrainConfig};

/// Rows processed per forward pass outside training.
pub const EVAL_CHUNK: usize = 64;

/// Whole labelled instances as samples (classification).
pub fn labeled_samples(model: &Model, instances: &[SeriesInstance]) -> Result<Samples> {
    let b = WindowBatch::from_labeled(instances)?;
    let visual = model.prepare_visual(&b.x, EVAL_CHUNK)?;
    Ok(Samples { x: b.x, labels: b.labels, visual })
}

/// Fixed windows of every instance (anomaly detection).
pub fn window_samples(model: &Model, instances: &[SeriesInstance], stride: usize) -> Result<Samples> {
    let mut windows = Vec::new();
    for (i, s) in instances.iter().enumerate() {
        windows.extend(sliding_windows(s, i, model.cfg.seq_len, stride)?.windows);
    }
    if windows.is_empty() {
        return Err(Error::Data(format!("no window of length {} fits", model.cfg.seq_len)));
    }
    let b = WindowBatch::from_windows(&windows)?;
    let visual = model.prepare_visual(&b.x, EVAL_CHUNK)?;
    Ok(Samples { x: b.x, labels: BatchLabels::None, visual })
}

/// Context/target pairs of every instance (forecasting).
pub fn forecast_samples(model: &Model, instances: &[SeriesInstance], stride: usize) -> Result<Samples> {
    let mut pairs = Vec::new();
    for (i, s) in instances.iter().enumerate() {
        pairs.extend(forecast_windows(s, i, model.cfg.seq_len, model.cfg.task.horizon, stride)?.0);
    }
    if pairs.is_empty() {
        return Err(Error::Data("no forecast window fits".into()));
    }
    let b = WindowBatch::from_forecast(&pairs)?;
    let visual = model.prepare_visual(&b.x, EVAL_CHUNK)?;
    Ok(Samples { x: b.x, labels: b.labels, visual })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub accuracy: f64,
    pub log: RunLog,
}

pub fn run_classification(
    model: &mut Model,
    train: &[SeriesInstance],
    val: Option<&[SeriesInstance]>,
    test: &[SeriesInstance],
    cfg: &TrainConfig,
    seed: u64,
    clock: &dyn Clock,
) -> Result<ClassificationResult> {
    let tr = labeled_samples(model, train)?;
    let va = val.map(|v| labeled_samples(model, v)).transpose()?;
    let log = train_task(model, &tr, va.as_ref(), cfg, seed, clock)?;
    let accuracy = evaluate_classification(model, test)?;
    Ok(ClassificationResult { accuracy, log })
}

pub fn evaluate_classification(model: &Model, test: &[SeriesInstance]) -> Result<f64> {
    let te = labeled_samples(model, test)?;
    let logits = model.predict(&te.x, te.visual.as_ref(), EVAL_CHUNK)?;
    match &te.labels {
        BatchLabels::Classes(k) => accuracy(&logits, k),
        _ => Err(Error::Data("test instances carry no class labels".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    pub pa_f1: Option<f64>,
    pub vus_pr: Option<f64>,
    /// VUS of the same scores randomly permuted, as a chance reference.
    pub vus_pr_shuffled: Option<f64>,
    pub max_buffer: usize,
    pub scores: Vec<f64>,
    pub log: RunLog,
}

/// Per-step anomaly scores of a whole series: windows at `stride`, scores
/// averaged where windows overlap.
pub fn score_series(model: &Model, series: &SeriesInstance, stride: usize) -> Result<Vec<f64>> {
    let w = window_samples(model, core::slice::from_ref(series), stride)?;
    let recon = model.predict(&w.x, w.visual.as_ref(), EVAL_CHUNK)?;
    let s = anomaly_score(&w.x, &recon)?;
    let l = model.cfg.seq_len;
    let mut per_window = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        per_window.push((i * stride, s.data()[i * l..(i + 1) * l].to_vec()));
    }
    Ok(series_scores(&per_window, series.len()))
}

/// Train on non-overlapping windows (`train_stride`), score every test series
/// at `score_stride`, and evaluate the concatenated scores.
pub fn run_anomaly(
    model: &mut Model,
    train: &[SeriesInstance],
    test: &[SeriesInstance],
    cfg: &TrainConfig,
    train_stride: usize,
    score_stride: usize,
    seed: u64,
    clock: &dyn Clock,
) -> Result<AnomalyResult> {
    let tr = window_samples(model, train, train_stride)?;
    let log = train_task(model, &tr, None, cfg, seed, clock)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in test {
        scores.extend(score_series(model, s, score_stride)?);
        labels.extend_from_slice(
            s.step_labels().ok_or_else(|| Error::Data("anomaly test series has no step labels".into()))?,
        );
    }
    let max_buffer = default_max_buffer(&labels);
    let pa = point_adjusted_f1(&scores, &labels)?.map(|b| b.f1);
    let vus = vus_pr(&scores, &labels, max_buffer)?;
    let mut shuffled = scores.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let vus_shuffled = vus_pr(&shuffled, &labels, max_buffer)?;
    Ok(AnomalyResult { pa_f1: pa, vus_pr: vus, vus_pr_shuffled: vus_shuffled, max_buffer, scores, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub mse: f64,
    pub mae: f64,
    /// Error of repeating the last observed value.
    pub persistence_mse: f64,
    pub log: RunLog,
}

/// Repeat the last context step `horizon` times: `[B, L, C]` to `[B, F, C]`.
pub fn persistence_forecast(context: &Tensor, horizon: usize) -> Tensor {
    let (b, l, c) = (context.dim(0), context.dim(1), context.dim(2));
    Tensor::from_fn(&[b, horizon, c], |i| {
        let (bi, ci) = (i / (horizon * c), i % c);
        context.data()[(bi * l + l - 1) * c + ci]
    })
}

pub fn evaluate_forecast(model: &Model, test: &[SeriesInstance], stride: usize) -> Result<(f64, f64, f64)> {
    let te = forecast_samples(model, test, stride)?;
    let y = model.predict(&te.x, te.visual.as_ref(), EVAL_CHUNK)?;
    let BatchLabels::Future(target) = &te.labels else {
        return Err(Error::Data("forecast samples without targets".into()));
    };
    let (mse, mae) = mse_mae(&y, target)?;
    let (pmse, _) = mse_mae(&persistence_forecast(&te.x, model.cfg.task.horizon), target)?;
    Ok((mse, mae, pmse))
}

pub fn run_forecast(
    model: &mut Model,
    train: &[SeriesInstance],
    val: Option<&[SeriesInstance]>,
    test: &[SeriesInstance],
    cfg: &TrainConfig,
    stride: usize,
    seed: u64,
    clock: &dyn Clock,
) -> Result<ForecastResult> {
    let tr = forecast_samples(model, train, stride)?;
    let va = val.map(|v| forecast_samples(model, v, stride)).transpose()?;
    let log = train_task(model, &tr, va.as_ref(), cfg, seed, clock)?;
    let (mse, mae, persistence_mse) = evaluate_forecast(model, test, stride)?;
    Ok(ForecastResult { mse, mae, persistence_mse, log })
}

/// Autoregressive MSE for each total horizon in `horizons`, on context/target
/// pairs cut from `series` every `stride` steps.
pub fn autoregressive_errors(
    model: &Model,
    series: &SeriesInstance,
    horizons: &[usize],
    stride: usize,
) -> Result<BTreeMap<usize, f64>> {
    let longest = horizons.iter().copied().max().unwrap_or(0);
    let (pairs, _) = forecast_windows(series, 0, model.cfg.seq_len, longest, stride)?;
    if pairs.is_empty() {
        return Err(Error::Data(format!("series too short for a {longest}-step horizon")));
    }
    let b = WindowBatch::from_forecast(&pairs)?;
    let BatchLabels::Future(target) = &b.labels else { unreachable!() };
    let (y, _) = forecast_autoregressive(model, &b.x, longest)?;
    let mut out = BTreeMap::new();
    for &h in horizons {
        let (mse, _) = mse_mae(&y.slice_axis(1, 0, h), &target.slice_axis(1, 0, h))?;
        out.insert(h, mse);
    }
    Ok(out)
}

/// Build a model and check that its task matches the expectation.
pub fn build(cfg: &ModelConfig, task: Task) -> Result<Model> {
    if cfg.task.task != task {
        return Err(Error::config(
            "task.task",
            format!("expected a {} model, config says {}", task.as_str(), cfg.task.task.as_str()),
        ));
    }
    Model::new(cfg.clone())
}
