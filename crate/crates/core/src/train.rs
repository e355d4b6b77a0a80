//! Learning-rate schedule, AdamW, the training loop with early stopping, and
//! autoregressive forecasting.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbone::TuningPolicy;
use crate::data::BatchLabels;
use crate::error::{Error, Result};
use crate::heads::Task;
use crate::math;
use crate::model::{Model, Visual};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Direct,
    Autoregressive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_start: f64,
    /// `None` means 5% of the total step count (at least 1).
    pub warmup_steps: Option<usize>,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    pub policy: TuningPolicy,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_task(Task::Classification)
    }
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        let (max_epochs, patience) = match task {
            Task::Classification => (50, 15),
            Task::AnomalyDetection | Task::Forecasting => (10, 3),
        };
        Self {
            task,
            max_epochs,
            patience,
            batch_size: 64,
            lr_max: 1e-3,
            lr_start: 1e-6,
            warmup_steps: None,
            weight_decay: 0.01,
            seeds: alloc::vec![0],
            policy: TuningPolicy::Default,
            mode: TrainMode::Direct,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be positive"));
        }
        if !(self.lr_max > 0.0 && self.lr_start >= 0.0) {
            return Err(Error::config("train.lr_max", "learning rates must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        Ok(())
    }

    pub fn warmup_for(&self, total_steps: usize) -> usize {
        self.warmup_steps.unwrap_or_else(|| {
            (math::round(0.05 * total_steps as f64) as usize).max(1).min(total_steps.saturating_sub(1))
        })
    }
}

/// Linear warm-up from `lr_start` to `lr_max`, then half-cosine decay back to
/// `lr_start` at `total_steps`. Steps past the end stay at `lr_start`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    let warmup = cfg.warmup_for(total_steps);
    if warmup >= total_steps {
        return Err(Error::config(
            "train.warmup_steps",
            format!("warm-up of {warmup} steps is not shorter than {total_steps} total steps"),
        ));
    }
    let (lo, hi) = (cfg.lr_start, cfg.lr_max);
    if step < warmup {
        return Ok(lo + (hi - lo) * step as f64 / warmup as f64);
    }
    let progress = ((step - warmup) as f64 / (total_steps - warmup) as f64).min(1.0);
    Ok(lo + 0.5 * (hi - lo) * (1.0 + math::cos(PI * progress)))
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, ..Self::default() }
    }

    /// One update of every trainable parameter that has a gradient. Decay
    /// applies only to parameters flagged for it (weights, not biases or
    /// norms).
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - math::powf(self.beta1, self.t as f64);
        let bc2 = 1.0 - math::powf(self.beta2, self.t as f64);
        for (&id, g) in grads {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let n = g.numel();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (alloc::vec![0.0; n], alloc::vec![0.0; n]));
            let decay = if p.decay { weight_decay } else { 0.0 };
            for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * decay * *w;
                *w -= lr * mh / (math::sqrt(vh) + self.eps);
            }
        }
    }
}

/// Wall-clock source, injected so the core stays free of `std`.
pub trait Clock {
    /// Milliseconds since an arbitrary origin.
    fn now_ms(&self) -> f64;
}

/// A clock that always reads 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn now_ms(&self) -> f64 {
        0.0
    }
}

/// Inputs and labels of a whole split.
#[derive(Clone, Debug)]
pub struct Samples {
    /// `[N, L, C]`
    pub x: Tensor,
    pub labels: BatchLabels,
    pub visual: Option<Visual>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.x.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Samples {
        let labels = match &self.labels {
            BatchLabels::None => BatchLabels::None,
            BatchLabels::Classes(k) => BatchLabels::Classes(rows.iter().map(|&i| k[i]).collect()),
            BatchLabels::Steps(s) => {
                let l = self.x.dim(1);
                BatchLabels::Steps(rows.iter().flat_map(|&i| s[i * l..(i + 1) * l].iter().copied()).collect())
            }
            BatchLabels::Future(y) => BatchLabels::Future(y.select_rows(rows)),
        };
        Samples { x: self.x.select_rows(rows), labels, visual: self.visual.as_ref().map(|v| v.select(rows)) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Mean task loss over `samples`, evaluated in chunks.
pub fn evaluate_loss(model: &Model, samples: &Samples, chunk: usize) -> Result<f64> {
    let n = samples.len();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let m = chunk.max(1).min(n - start);
        let rows: Vec<usize> = (start..start + m).collect();
        let batch = samples.select(&rows);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch.x, batch.visual.as_ref())?;
        let loss = model.loss(&mut tape, &out, &batch.x, &batch.labels)?;
        total += tape.value(loss).item() * m as f64;
        start += m;
    }
    Ok(total / n.max(1) as f64)
}

/// Train `model` in place. Validation loss (or training loss when `val` is
/// `None`) drives early stopping, and the best weights are restored at the
/// end.
pub fn train_task(
    model: &mut Model,
    train: &Samples,
    val: Option<&Samples>,
    cfg: &TrainConfig,
    seed: u64,
    clock: &dyn Clock,
) -> Result<RunLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    model.apply_policy(cfg.policy);
    let n = train.len();
    let bs = cfg.batch_size.min(n);
    let per_epoch = math::div_ceil(n, bs);
    let total = per_epoch * cfg.max_epochs;
    lr_at(0, total, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new();
    let mut log = RunLog { seed, best_val_loss: f64::INFINITY, ..RunLog::default() };
    let mut best = model.store.snapshot();
    let mut since_best = 0;
    let mut step = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.max_epochs {
        let t0 = clock.now_ms();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (bi, rows) in order.chunks(bs).enumerate() {
            lr = lr_at(step, total, cfg)?;
            let batch = train.select(rows);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch.x, batch.visual.as_ref())?;
            let loss = model.loss(&mut tape, &out, &batch.x, &batch.labels)?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss).params();
            let grad_norm = math::sqrt(grads.values().flat_map(|g| g.data().iter()).map(|v| v * v).sum::<f64>());
            if !value.is_finite() || !grad_norm.is_finite() {
                return Err(Error::NonFiniteLoss { lr, grad_norm, batch: epoch * per_epoch + bi });
            }
            opt.step(&mut model.store, &grads, lr, cfg.weight_decay);
            log.step_losses.push(value);
            epoch_loss += value * rows.len() as f64;
            step += 1;
        }
        let train_loss = epoch_loss / n as f64;
        let val_loss = match val {
            Some(v) if !v.is_empty() => evaluate_loss(model, v, bs)?,
            _ => train_loss,
        };
        log.epochs.push(EpochLog { epoch, train_loss, val_loss, lr, wall_ms: clock.now_ms() - t0 });
        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best = model.store.snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    model.store.restore(&best);
    Ok(log)
}

/// Roll a direct forecaster forward until `f_total` steps are covered. Each
/// call sees the latest `L` steps (re-rendered when the model has a vision
/// branch). Returns the forecast `[B, f_total, C]` and the number of calls.
pub fn forecast_autoregressive(model: &Model, context: &Tensor, f_total: usize) -> Result<(Tensor, usize)> {
    if model.cfg.task.task != Task::Forecasting {
        return Err(Error::contract("autoregressive mode needs a forecasting model"));
    }
    let l = model.cfg.seq_len;
    let f_step = model.cfg.task.horizon;
    let b = context.dim(0);
    let mut window = context.clone();
    let mut pieces: Vec<Tensor> = Vec::new();
    let mut have = 0;
    let mut calls = 0;
    while have < f_total {
        let y = model.predict(&window, None, b.max(1))?;
        calls += 1;
        have += f_step;
        let joined = Tensor::concat(&[&window, &y], 1)?;
        window = joined.slice_axis(1, joined.dim(1) - l, l);
        pieces.push(y);
    }
    let refs: Vec<&Tensor> = pieces.iter().collect();
    let all = Tensor::concat(&refs, 1)?;
    Ok((all.slice_axis(1, 0, f_total), calls))
}
