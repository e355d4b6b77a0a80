//! Task heads, losses and anomaly scores.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{LayerNorm, Linear, ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::tokenizer::{revin_invert_var, NormStats};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Classification,
    AnomalyDetection,
    Forecasting,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Classification => "classification",
            Self::AnomalyDetection => "anomaly_detection",
            Self::Forecasting => "forecasting",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub task: Task,
    /// Class count (classification).
    pub n_classes: usize,
    /// Forecast horizon.
    pub horizon: usize,
    pub pooling: Pooling,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { task: Task::Classification, n_classes: 2, horizon: 96, pooling: Pooling::Mean }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        match self.task {
            Task::Classification if self.n_classes < 2 => {
                Err(Error::config("task.n_classes", "classification needs at least 2 classes"))
            }
            Task::Forecasting if self.horizon == 0 => Err(Error::config("task.horizon", "must be positive")),
            _ => Ok(()),
        }
    }
}

/// Pool → LayerNorm → affine to `K` logits.
#[derive(Clone, Debug)]
pub struct ClassifyHead {
    pub norm: LayerNorm,
    pub linear: Linear,
    pub pooling: Pooling,
}

impl ClassifyHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, k: usize, pooling: Pooling) -> Self {
        Self {
            norm: LayerNorm::new(store, "head.norm", ParamGroup::Head, d),
            linear: Linear::new(store, rng, "head.cls", ParamGroup::Head, d, k),
            pooling,
        }
    }

    /// `f: [B, N, d]` to logits `[B, K]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        let s = tape.shape(f).to_vec();
        let pooled = match self.pooling {
            Pooling::Mean => tape.mean_axis(f, 1)?,
            Pooling::Last => {
                let last = tape.slice(f, 1, s[1] - 1, 1)?;
                tape.reshape(last, &[s[0], s[2]])?
            }
        };
        let h = self.norm.forward(tape, store, pooled)?;
        self.linear.forward(tape, store, h)
    }
}

/// Per-token LayerNorm → affine to `P·C` → un-patch → crop → denormalize.
#[derive(Clone, Debug)]
pub struct AnomalyHead {
    pub norm: LayerNorm,
    pub linear: Linear,
    pub patch_len: usize,
    pub channels: usize,
}

impl AnomalyHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, patch_len: usize, channels: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, "head.norm", ParamGroup::Head, d),
            linear: Linear::new(store, rng, "head.ad", ParamGroup::Head, d, patch_len * channels),
            patch_len,
            channels,
        }
    }

    /// `f: [B, N, d]` to the reconstruction `[B, len, C]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var, stats: &NormStats, len: usize) -> Result<Var> {
        let s = tape.shape(f).to_vec();
        let padded = s[1] * self.patch_len;
        if len > padded || stats.channels() != self.channels {
            return Err(Error::contract(format!(
                "anomaly head: {} tokens of {} steps cannot cover {len} steps of {} channels",
                s[1],
                self.patch_len,
                stats.channels()
            )));
        }
        let h = self.norm.forward(tape, store, f)?;
        let y = self.linear.forward(tape, store, h)?;
        let y = tape.reshape(y, &[s[0], padded, self.channels])?;
        let y = if padded == len { y } else { tape.slice(y, 1, 0, len)? };
        revin_invert_var(tape, y, stats)
    }
}

/// Shared across channels: LayerNorm → flatten `N·d` → affine to `F`.
#[derive(Clone, Debug)]
pub struct ForecastHead {
    pub norm: LayerNorm,
    pub linear: Linear,
    pub horizon: usize,
}

impl ForecastHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, n_tokens: usize, horizon: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, "head.norm", ParamGroup::Head, d),
            linear: Linear::new(store, rng, "head.fc", ParamGroup::Head, n_tokens * d, horizon),
            horizon,
        }
    }

    /// `f: [B·C, N, d]` to the forecast `[B, F, C]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var, stats: &NormStats) -> Result<Var> {
        let s = tape.shape(f).to_vec();
        let c = stats.channels();
        if c == 0 || s[0] % c != 0 || s[0] / c != stats.batch() {
            return Err(Error::contract(format!(
                "forecast head: {} rows do not split into {} instances of {c} channels",
                s[0],
                stats.batch()
            )));
        }
        let b = s[0] / c;
        let h = self.norm.forward(tape, store, f)?;
        let h = tape.reshape(h, &[s[0], s[1] * s[2]])?;
        let y = self.linear.forward(tape, store, h)?;
        let y = tape.reshape(y, &[b, c, self.horizon])?;
        let y = tape.permute(y, &[0, 2, 1])?;
        revin_invert_var(tape, y, stats)
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Classify(ClassifyHead),
    Anomaly(AnomalyHead),
    Forecast(ForecastHead),
}

/// Batch-mean cross-entropy.
pub fn loss_cls(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Mean squared error.
pub fn loss_recon(tape: &mut Tape, y: Var, target: Var) -> Result<Var> {
    tape.mse(y, target)
}

/// Per-step channel-mean squared error, `[B, L, C]` pairs to `[B, L]`.
pub fn anomaly_score(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    if x.shape() != x_hat.shape() || x.rank() != 3 {
        return Err(Error::contract(format!("anomaly_score: {:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    let c = x.dim(2);
    let data = x
        .data()
        .chunks(c)
        .zip(x_hat.data().chunks(c))
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / c as f64)
        .collect();
    Tensor::new(&[x.dim(0), x.dim(1)], data)
}

/// Average window scores back onto a series of `len` steps. Steps covered by
/// no window score 0.
pub fn series_scores(windows: &[(usize, Vec<f64>)], len: usize) -> Vec<f64> {
    let mut sum = vec![0.0; len];
    let mut count = vec![0usize; len];
    for (start, s) in windows {
        for (i, v) in s.iter().enumerate() {
            if let (Some(a), Some(n)) = (sum.get_mut(start + i), count.get_mut(start + i)) {
                *a += v;
                *n += 1;
            }
        }
    }
    sum.iter().zip(&count).map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 }).collect()
}

/// Cross-entropy of plain logits `[B, K]`, for evaluation.
pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let k = logits.dim(1);
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        if y >= k {
            return Err(Error::Data(format!("label {y} outside [0, {k})")));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + math::ln(row.iter().map(|v| math::exp(v - m)).sum::<f64>());
        total += lse - row[y];
    }
    Ok(total / labels.len().max(1) as f64)
}
