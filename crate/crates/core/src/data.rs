//! Series instances, windowing, synthetic benchmark generators and few-shot
//! subsetting.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// One multivariate series of shape `[len, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesInstance {
    values: Tensor,
    pub channel_names: Option<Vec<String>>,
    step_labels: Option<Vec<u8>>,
    pub class_label: Option<usize>,
}

impl SeriesInstance {
    pub fn new(values: Tensor, step_labels: Option<Vec<u8>>, class_label: Option<usize>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Data(format!("series must be [len, channels], got {:?}", values.shape())));
        }
        if let Some(pos) = values.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {} column {}",
                pos / values.dim(1),
                pos % values.dim(1)
            )));
        }
        if let Some(l) = &step_labels {
            if l.len() != values.dim(0) {
                return Err(Error::Data(format!("{} step labels for a series of length {}", l.len(), values.dim(0))));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(Error::Data("step labels must be 0 or 1".into()));
            }
        }
        Ok(Self { values, channel_names: None, step_labels, class_label })
    }

    pub fn with_channel_names(mut self, names: Vec<String>) -> Self {
        self.channel_names = Some(names);
        self
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn step_labels(&self) -> Option<&[u8]> {
        self.step_labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.dim(1)
    }

    /// Time steps `range` as a new instance (labels sliced in lockstep).
    pub fn slice(&self, range: Range<usize>) -> SeriesInstance {
        let values = self.values.slice_axis(0, range.start, range.len());
        SeriesInstance {
            values,
            channel_names: self.channel_names.clone(),
            step_labels: self.step_labels.as_ref().map(|l| l[range].to_vec()),
            class_label: self.class_label,
        }
    }
}

/// Checks that every instance has the same channel count.
pub fn check_channel_schema(instances: &[SeriesInstance]) -> Result<usize> {
    let Some(first) = instances.first() else {
        return Ok(0);
    };
    let c = first.channels();
    if let Some((i, bad)) = instances.iter().enumerate().find(|(_, s)| s.channels() != c) {
        return Err(Error::Data(format!("schema error: instance {i} has {} channels, expected {c}", bad.channels())));
    }
    Ok(c)
}

/// What to do with non-finite cells during ingestion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NanPolicy {
    #[default]
    Reject,
    Interpolate,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    pub imputed_rows: Vec<usize>,
    pub dropped_rows: Vec<usize>,
}

/// Build a `[rows, channels]` array from parsed rows under `policy`.
///
/// With `Interpolate`, each non-finite cell is replaced by linear
/// interpolation between the nearest finite neighbours in its column (edge
/// gaps copy the nearest finite value). A column with no finite value at all
/// is rejected either way.
pub fn ingest_rows(rows: &[Vec<f64>], policy: NanPolicy) -> Result<(Tensor, IngestReport)> {
    let mut report = IngestReport::default();
    if rows.is_empty() {
        return Err(Error::Data("no rows".into()));
    }
    let c = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * c);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != c {
            return Err(Error::Data(format!("row {i} has {} columns, expected {c}", r.len())));
        }
        if r.iter().any(|v| !v.is_finite()) {
            match policy {
                NanPolicy::Reject => {
                    return Err(Error::Data(format!("non-finite value in row {i}")));
                }
                NanPolicy::Interpolate => report.imputed_rows.push(i),
            }
        }
        data.extend_from_slice(r);
    }
    let n = rows.len();
    if !report.imputed_rows.is_empty() {
        for col in 0..c {
            let finite: Vec<usize> = (0..n).filter(|&i| data[i * c + col].is_finite()).collect();
            if finite.is_empty() {
                return Err(Error::Data(format!("column {col} has no finite values")));
            }
            for i in 0..n {
                if data[i * c + col].is_finite() {
                    continue;
                }
                let after = finite.partition_point(|&j| j < i);
                let v = match (after.checked_sub(1).map(|k| finite[k]), finite.get(after)) {
                    (Some(a), Some(&b)) => {
                        let (va, vb) = (data[a * c + col], data[b * c + col]);
                        va + (vb - va) * (i - a) as f64 / (b - a) as f64
                    }
                    (Some(a), None) => data[a * c + col],
                    (None, Some(&b)) => data[b * c + col],
                    (None, None) => unreachable!(),
                };
                data[i * c + col] = v;
            }
        }
    }
    Ok((Tensor::new(&[n, c], data)?, report))
}

/// Where a window came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOrigin {
    pub instance: usize,
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub x: Tensor,
    pub step_labels: Option<Vec<u8>>,
    pub origin: WindowOrigin,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Windows {
    pub windows: Vec<Window>,
    pub warnings: Vec<String>,
}

/// Number of windows `floor((len − window)/stride) + 1`, or 0 when the window
/// does not fit.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if window == 0 || stride == 0 || window > len {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// Fixed-length windows starting at `0, stride, 2·stride, …`; a trailing
/// partial window is dropped.
pub fn sliding_windows(instance: &SeriesInstance, instance_id: usize, window: usize, stride: usize) -> Result<Windows> {
    if window == 0 || stride == 0 {
        return Err(Error::config("window", "window length and stride must be positive"));
    }
    let mut out = Windows::default();
    if window > instance.len() {
        out.warnings.push(format!("instance {instance_id}: window {window} exceeds series length {}", instance.len()));
        return Ok(out);
    }
    for k in 0..window_count(instance.len(), window, stride) {
        let start = k * stride;
        let part = instance.slice(start..start + window);
        out.windows.push(Window {
            x: part.values,
            step_labels: part.step_labels,
            origin: WindowOrigin { instance: instance_id, start },
        });
    }
    Ok(out)
}

/// A context window and the horizon that immediately follows it.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastPair {
    pub context: Tensor,
    pub target: Tensor,
    pub origin: WindowOrigin,
}

pub fn forecast_windows(
    instance: &SeriesInstance,
    instance_id: usize,
    context: usize,
    horizon: usize,
    stride: usize,
) -> Result<(Vec<ForecastPair>, Vec<String>)> {
    let windows = sliding_windows(instance, instance_id, context + horizon, stride)?;
    let pairs = windows
        .windows
        .into_iter()
        .map(|w| ForecastPair {
            context: w.x.slice_axis(0, 0, context),
            target: w.x.slice_axis(0, context, horizon),
            origin: w.origin,
        })
        .collect();
    Ok((pairs, windows.warnings))
}

/// Task-dependent labels of a [`WindowBatch`].
#[derive(Clone, Debug, PartialEq)]
pub enum BatchLabels {
    None,
    Classes(Vec<usize>),
    /// `[B, L]` flattened row-major.
    Steps(Vec<u8>),
    /// `[B, F, C]`
    Future(Tensor),
}

/// A batch of equally shaped windows `[B, L, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub x: Tensor,
    pub labels: BatchLabels,
    pub origins: Vec<WindowOrigin>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.x.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_windows(windows: &[Window]) -> Result<Self> {
        let xs: Vec<Tensor> = windows.iter().map(|w| w.x.clone()).collect();
        let x = Tensor::stack(&xs)?;
        let labels = if windows.iter().all(|w| w.step_labels.is_some()) {
            BatchLabels::Steps(windows.iter().flat_map(|w| w.step_labels.clone().unwrap()).collect())
        } else {
            BatchLabels::None
        };
        Ok(Self { x, labels, origins: windows.iter().map(|w| w.origin).collect() })
    }

    pub fn from_forecast(pairs: &[ForecastPair]) -> Result<Self> {
        let ctx: Vec<Tensor> = pairs.iter().map(|p| p.context.clone()).collect();
        let tgt: Vec<Tensor> = pairs.iter().map(|p| p.target.clone()).collect();
        Ok(Self {
            x: Tensor::stack(&ctx)?,
            labels: BatchLabels::Future(Tensor::stack(&tgt)?),
            origins: pairs.iter().map(|p| p.origin).collect(),
        })
    }

    /// Whole equal-length instances with class labels.
    pub fn from_labeled(instances: &[SeriesInstance]) -> Result<Self> {
        let xs: Vec<Tensor> = instances.iter().map(|s| s.values.clone()).collect();
        let labels = instances
            .iter()
            .enumerate()
            .map(|(i, s)| s.class_label.ok_or_else(|| Error::Data(format!("instance {i} has no class label"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            x: Tensor::stack(&xs)?,
            labels: BatchLabels::Classes(labels),
            origins: (0..instances.len()).map(|i| WindowOrigin { instance: i, start: 0 }).collect(),
        })
    }
}

/// Which synthetic generator to run, with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    /// `n_classes` classes of sinusoid mixtures; class `k` has base frequency
    /// `base_freqs[k]` cycles per series.
    ClassMotifs {
        n_instances: usize,
        n_classes: usize,
        length: usize,
        channels: usize,
        base_freqs: Vec<f64>,
        snr_db: f64,
    },
    /// Sum of sinusoids (periods in steps) plus a linear trend, one long series.
    SeasonalTrend {
        length: usize,
        channels: usize,
        periods: Vec<f64>,
        amplitudes: Vec<f64>,
        trend_slope: f64,
        snr_db: f64,
    },
    /// A periodic base signal with level-shift segments and point spikes,
    /// labelled step-by-step.
    AnomalyInjected {
        length: usize,
        channels: usize,
        period: f64,
        n_segments: usize,
        segment_len: usize,
        shift_height: f64,
        n_spikes: usize,
        spike_height: f64,
        snr_db: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    pub seed: u64,
    /// Warn when the requested SNR leaves classes hard to separate.
    #[serde(default)]
    pub assert_separable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub instances: Vec<SeriesInstance>,
    pub warnings: Vec<String>,
}

fn noise_std(signal: &[f64], snr_db: f64) -> f64 {
    let power = signal.iter().map(|v| v * v).sum::<f64>() / signal.len().max(1) as f64;
    math::sqrt(power / math::powf(10.0, snr_db / 10.0))
}

fn add_noise(rng: &mut ChaCha8Rng, column: &mut [f64], snr_db: f64) {
    let std = noise_std(column, snr_db);
    if std > 0.0 {
        let n = Normal::new(0.0, std).expect("finite std");
        for v in column.iter_mut() {
            *v += n.sample(rng);
        }
    }
}

fn columns_to_tensor(cols: &[Vec<f64>]) -> Tensor {
    let len = cols[0].len();
    let c = cols.len();
    Tensor::from_fn(&[len, c], |i| cols[i % c][i / c])
}

/// Generate a synthetic dataset. Output is a pure function of `spec`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut warnings = Vec::new();
    let instances = match &spec.kind {
        SyntheticKind::ClassMotifs { n_instances, n_classes, length, channels, base_freqs, snr_db } => {
            if *n_classes < 2 || base_freqs.len() != *n_classes {
                return Err(Error::config(
                    "base_freqs",
                    format!("need one base frequency per class ({n_classes} classes)"),
                ));
            }
            if *length < 2 || *channels == 0 {
                return Err(Error::config("length", "need length >= 2 and channels >= 1"));
            }
            if spec.assert_separable && *snr_db <= 0.0 {
                warnings.push(format!("SNR {snr_db} dB <= 0: classes may not be separable"));
            }
            if n_instances % n_classes != 0 {
                warnings.push(format!("{n_instances} instances do not split evenly into {n_classes} classes"));
            }
            let mut out = Vec::with_capacity(*n_instances);
            for i in 0..*n_instances {
                let k = i % n_classes;
                let f = base_freqs[k];
                let cols: Vec<Vec<f64>> = (0..*channels)
                    .map(|_| {
                        let amp = rng.random_range(0.8..1.2);
                        let phase = rng.random_range(0.0..2.0 * PI);
                        let phase2 = rng.random_range(0.0..2.0 * PI);
                        let mut col: Vec<f64> = (0..*length)
                            .map(|t| {
                                let u = t as f64 / *length as f64;
                                amp * math::sin(2.0 * PI * f * u + phase)
                                    + 0.4 * amp * math::sin(4.0 * PI * f * u + phase2)
                            })
                            .collect();
                        add_noise(&mut rng, &mut col, *snr_db);
                        col
                    })
                    .collect();
                out.push(SeriesInstance::new(columns_to_tensor(&cols), None, Some(k))?);
            }
            out
        }
        SyntheticKind::SeasonalTrend { length, channels, periods, amplitudes, trend_slope, snr_db } => {
            if periods.is_empty() || periods.len() != amplitudes.len() {
                return Err(Error::config("periods", "periods and amplitudes must be non-empty and equally long"));
            }
            let cols: Vec<Vec<f64>> = (0..*channels)
                .map(|c| {
                    let phases: Vec<f64> = periods.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
                    let scale = 1.0 + 0.25 * c as f64;
                    let mut col: Vec<f64> = (0..*length)
                        .map(|t| {
                            let s: f64 = periods
                                .iter()
                                .zip(amplitudes)
                                .zip(&phases)
                                .map(|((p, a), ph)| a * math::sin(2.0 * PI * t as f64 / p + ph))
                                .sum();
                            scale * s + trend_slope * t as f64
                        })
                        .collect();
                    add_noise(&mut rng, &mut col, *snr_db);
                    col
                })
                .collect();
            vec![SeriesInstance::new(columns_to_tensor(&cols), None, None)?]
        }
        SyntheticKind::AnomalyInjected {
            length,
            channels,
            period,
            n_segments,
            segment_len,
            shift_height,
            n_spikes,
            spike_height,
            snr_db,
        } => {
            let needed = n_segments * (segment_len + 2) + n_spikes * 3;
            if *segment_len == 0 && *n_segments > 0 || needed > *length {
                return Err(Error::config(
                    "n_segments",
                    format!(
                        "{n_segments} segments of {segment_len} and {n_spikes} spikes do not fit in {length} steps"
                    ),
                ));
            }
            let mut cols: Vec<Vec<f64>> = (0..*channels)
                .map(|c| {
                    let phase = rng.random_range(0.0..2.0 * PI);
                    let p = period * (1.0 + 0.15 * c as f64);
                    let mut col: Vec<f64> = (0..*length)
                        .map(|t| {
                            let u = 2.0 * PI * t as f64 / p;
                            math::sin(u + phase) + 0.5 * math::sin(2.5 * u + 0.5 * phase)
                        })
                        .collect();
                    add_noise(&mut rng, &mut col, *snr_db);
                    col
                })
                .collect();
            let stds: Vec<f64> = cols.iter().map(|col| math::sqrt(math::mean_var(col).1).max(1e-12)).collect();
            let mut labels = vec![0u8; *length];
            // occupied[i] also reserves a one-step gap around each anomaly
            let mut occupied = vec![false; *length];
            let mut place = |rng: &mut ChaCha8Rng, span: usize| -> Result<usize> {
                for _ in 0..10_000 {
                    let start = rng.random_range(1..=length - span - 1);
                    if occupied[start - 1..start + span + 1].iter().all(|&o| !o) {
                        for o in &mut occupied[start - 1..start + span + 1] {
                            *o = true;
                        }
                        return Ok(start);
                    }
                }
                Err(Error::config("n_segments", "could not place anomalies without overlap"))
            };
            for _ in 0..*n_segments {
                let start = place(&mut rng, *segment_len)?;
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let hit = rng.random_range(0..*channels);
                for (c, col) in cols.iter_mut().enumerate() {
                    if c == hit || rng.random_bool(0.5) {
                        for v in &mut col[start..start + segment_len] {
                            *v += sign * shift_height * stds[c];
                        }
                    }
                }
                labels[start..start + segment_len].fill(1);
            }
            for _ in 0..*n_spikes {
                let at = place(&mut rng, 1)?;
                let c = rng.random_range(0..*channels);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                cols[c][at] += sign * spike_height * stds[c];
                labels[at] = 1;
            }
            vec![SeriesInstance::new(columns_to_tensor(&cols), Some(labels), None)?]
        }
    };
    Ok(SyntheticDataset { instances, warnings })
}

/// Which subsetting rule [`few_shot_subset`] applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetRule {
    /// Stratified random per class.
    Stratified,
    /// Chronologically first fraction of each series.
    Chronological,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShot {
    pub instances: Vec<SeriesInstance>,
    pub adjustments: Vec<String>,
}

/// Keep `fraction` of a training split.
pub fn few_shot_subset(dataset: &[SeriesInstance], fraction: f64, rule: SubsetRule, seed: u64) -> Result<FewShot> {
    if dataset.is_empty() {
        return Err(Error::Data("few-shot subset of an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("fraction", format!("{fraction} is not in (0, 1]")));
    }
    let mut adjustments = Vec::new();
    match rule {
        SubsetRule::Stratified => {
            let k = dataset
                .iter()
                .enumerate()
                .map(|(i, s)| s.class_label.ok_or_else(|| Error::Data(format!("instance {i} has no class label"))))
                .collect::<Result<Vec<_>>>()?;
            let n_classes = k.iter().max().map_or(0, |m| m + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut keep = Vec::new();
            for class in 0..n_classes {
                let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| k[i] == class).collect();
                if idx.is_empty() {
                    continue;
                }
                let mut n = math::floor(idx.len() as f64 * fraction) as usize;
                if n < 1 {
                    adjustments.push(format!("class {class}: {} x {fraction} floors to 0, keeping 1", idx.len()));
                    n = 1;
                }
                idx.shuffle(&mut rng);
                keep.extend_from_slice(&idx[..n]);
            }
            keep.sort_unstable();
            Ok(FewShot { instances: keep.iter().map(|&i| dataset[i].clone()).collect(), adjustments })
        }
        SubsetRule::Chronological => {
            let instances = dataset
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut n = math::floor(s.len() as f64 * fraction) as usize;
                    if n < 1 {
                        adjustments.push(format!("instance {i}: keeping 1 step"));
                        n = 1;
                    }
                    s.slice(0..n)
                })
                .collect();
            Ok(FewShot { instances, adjustments })
        }
    }
}

/// Train / validation / test ranges of a chronological split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBorders {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Ratio-based chronological split; the test part takes the remainder.
pub fn chrono_split(len: usize, train_ratio: f64, val_ratio: f64) -> Result<SplitBorders> {
    if !(train_ratio > 0.0 && val_ratio >= 0.0 && train_ratio + val_ratio < 1.0) {
        return Err(Error::config("split", format!("ratios {train_ratio}/{val_ratio} leave no test data")));
    }
    let a = math::floor(len as f64 * train_ratio) as usize;
    let b = a + math::floor(len as f64 * val_ratio) as usize;
    Ok(SplitBorders { train: 0..a, val: a..b, test: b..len })
}

/// Cut an instance at `borders`. Validation and test parts are extended
/// `lookback` steps into the past so their first forecast target starts
/// exactly at the border.
pub fn split_instance(instance: &SeriesInstance, borders: &SplitBorders, lookback: usize) -> [SeriesInstance; 3] {
    let back = |r: &Range<usize>| r.start.saturating_sub(lookback)..r.end;
    [instance.slice(borders.train.clone()), instance.slice(back(&borders.val)), instance.slice(back(&borders.test))]
}
