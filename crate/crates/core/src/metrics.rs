//! Evaluation measures and multi-seed aggregation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Share of rows whose argmax equals the label (first index wins ties).
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() || labels.is_empty() {
        return Err(Error::contract(format!("accuracy: logits {:?} for {} labels", logits.shape(), labels.len())));
    }
    let k = logits.dim(1);
    let hits = logits.data().chunks(k).zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean squared and mean absolute error.
pub fn mse_mae(y: &Tensor, target: &Tensor) -> Result<(f64, f64)> {
    if y.shape() != target.shape() || y.numel() == 0 {
        return Err(Error::contract(format!("mse_mae: {:?} vs {:?}", y.shape(), target.shape())));
    }
    let n = y.numel() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (a, b) in y.data().iter().zip(target.data()) {
        se += (a - b) * (a - b);
        ae += (a - b).abs();
    }
    Ok((se / n, ae / n))
}

/// Maximal runs of 1s as `[start, end)`.
pub fn segments(labels: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        if labels[i] == 1 {
            let s = i;
            while i < labels.len() && labels[i] == 1 {
                i += 1;
            }
            out.push((s, i));
        } else {
            i += 1;
        }
    }
    out
}

fn sweep(scores: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = scores.to_vec();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t.insert(0, f64::NEG_INFINITY);
    t.push(f64::INFINITY);
    t
}

fn f_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestF {
    pub f1: f64,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Best point-adjusted F over all unique score thresholds and ±∞. A point is
/// flagged when `score >= threshold`; a true segment with any flagged point
/// counts as fully detected. `None` when there are no positive labels.
pub fn point_adjusted_f1(scores: &[f64], labels: &[u8]) -> Result<Option<BestF>> {
    best_f(scores, labels, true)
}

/// Best plain (unadjusted) F over the same sweep.
pub fn unadjusted_f1(scores: &[f64], labels: &[u8]) -> Result<Option<BestF>> {
    best_f(scores, labels, false)
}

fn best_f(scores: &[f64], labels: &[u8], adjust: bool) -> Result<Option<BestF>> {
    check_binary(scores, labels)?;
    let segs = segments(labels);
    let n_pos: usize = segs.iter().map(|(s, e)| e - s).sum();
    if n_pos == 0 {
        return Ok(None);
    }
    // segment maxima (adjusted) or positive scores (plain), and negative scores, all sorted
    let mut pos: Vec<(f64, usize)> = if adjust {
        segs.iter().map(|&(s, e)| (scores[s..e].iter().copied().fold(f64::NEG_INFINITY, f64::max), e - s)).collect()
    } else {
        (0..labels.len()).filter(|&i| labels[i] == 1).map(|i| (scores[i], 1)).collect()
    };
    pos.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut neg: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] == 0).map(|i| scores[i]).collect();
    neg.sort_by(f64::total_cmp);
    // suffix sums of positive weights
    let mut suffix = vec![0usize; pos.len() + 1];
    for i in (0..pos.len()).rev() {
        suffix[i] = suffix[i + 1] + pos[i].1;
    }
    let mut best: Option<BestF> = None;
    for th in sweep(scores) {
        let tp = suffix[pos.partition_point(|p| p.0 < th)];
        let fp = neg.len() - neg.partition_point(|&v| v < th);
        let f1 = f_score(tp, fp, n_pos - tp);
        if best.is_none_or(|b| f1 > b.f1) {
            let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            best = Some(BestF { f1, threshold: th, precision, recall: tp as f64 / n_pos as f64 });
        }
    }
    Ok(best)
}

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::contract("labels must be binary"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("scores contain NaN"));
    }
    Ok(())
}

/// Label weights with a linear ramp of width `buffer` on both sides of every
/// segment: distance `k` outside a segment weighs `1 − k/(buffer+1)`.
pub fn buffered_weights(labels: &[u8], buffer: usize) -> Vec<f64> {
    let n = labels.len();
    let mut w: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    for (s, e) in segments(labels) {
        for k in 1..=buffer {
            let v = 1.0 - k as f64 / (buffer + 1) as f64;
            if s >= k && w[s - k] < v {
                w[s - k] = v;
            }
            if e - 1 + k < n && w[e - 1 + k] < v {
                w[e - 1 + k] = v;
            }
        }
    }
    w
}

/// Area under the precision-recall curve against buffered labels.
///
/// Thresholds run from high to low over the unique scores. Precision is the
/// mean label weight of the flagged points, recall the share of original
/// positives flagged; the curve starts at (recall 0, precision 1) and the
/// area is trapezoidal.
pub fn auc_pr_buffered(scores: &[f64], labels: &[u8], buffer: usize) -> Result<Option<f64>> {
    check_binary(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let w = buffered_weights(labels, buffer);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut flagged, mut wsum, mut hits) = (0usize, 0.0f64, 0usize);
    let (mut r_prev, mut p_prev) = (0.0, 1.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            flagged += 1;
            wsum += w[idx[i]];
            hits += labels[idx[i]] as usize;
            i += 1;
        }
        let r = hits as f64 / n_pos as f64;
        let p = wsum / flagged as f64;
        area += (r - r_prev) * (p + p_prev) / 2.0;
        r_prev = r;
        p_prev = p;
    }
    Ok(Some(area))
}

/// Default buffer: half the mean true-segment length, rounded, at most 100.
pub fn default_max_buffer(labels: &[u8]) -> usize {
    let segs = segments(labels);
    if segs.is_empty() {
        return 0;
    }
    let mean = segs.iter().map(|(s, e)| (e - s) as f64).sum::<f64>() / segs.len() as f64;
    (math::round(0.5 * mean) as usize).min(100)
}

/// Mean buffered AUC-PR over buffer widths `0..=max_buffer`.
pub fn vus_pr(scores: &[f64], labels: &[u8], max_buffer: usize) -> Result<Option<f64>> {
    let mut total = 0.0;
    for l in 0..=max_buffer {
        match auc_pr_buffered(scores, labels, l)? {
            Some(a) => total += a,
            None => return Ok(None),
        }
    }
    Ok(Some(total / (max_buffer + 1) as f64))
}

/// Sample mean and standard deviation (`n − 1`); the deviation is absent
/// below two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(math::sqrt(var)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    /// Seed for per-seed values, or the axis value for aggregates.
    pub label: String,
    pub seed: Option<u64>,
    pub value: f64,
}

/// One metric of one run configuration, across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metric: String,
    /// Ablation axis labels, e.g. `fusion = late`.
    pub axes: BTreeMap<String, String>,
    pub values: Vec<MetricValue>,
    pub mean: f64,
    pub std: Option<f64>,
}

impl MetricReport {
    pub fn from_seeds(task: &str, metric: &str, axes: BTreeMap<String, String>, per_seed: &[(u64, f64)]) -> Self {
        let values: Vec<MetricValue> = per_seed
            .iter()
            .map(|&(seed, value)| MetricValue { label: format!("seed={seed}"), seed: Some(seed), value })
            .collect();
        let (mean, std) = mean_std(&per_seed.iter().map(|p| p.1).collect::<Vec<_>>());
        Self { task: task.into(), metric: metric.into(), axes, values, mean, std }
    }
}

/// Collapse reports along `axis`: one value per report (its mean), then mean
/// and sample std over those. The remaining axes must agree.
pub fn aggregate(reports: &[MetricReport], axis: &str) -> Result<MetricReport> {
    let first = reports.first().ok_or_else(|| Error::contract("nothing to aggregate"))?;
    let mut axes = first.axes.clone();
    axes.remove(axis);
    let mut values = Vec::with_capacity(reports.len());
    for r in reports {
        let mut other = r.axes.clone();
        let label = other.remove(axis).unwrap_or_default();
        if other != axes || r.metric != first.metric {
            return Err(Error::contract(format!(
                "reports differ beyond axis `{axis}`: {:?} vs {:?}",
                r.axes, first.axes
            )));
        }
        values.push(MetricValue { label: format!("{axis}={label}"), seed: None, value: r.mean });
    }
    let (mean, std) = mean_std(&values.iter().map(|v| v.value).collect::<Vec<_>>());
    axes.insert(axis.into(), "aggregate".into());
    Ok(MetricReport { task: first.task.clone(), metric: first.metric.clone(), axes, values, mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_flag_adjusts_whole_segment() {
        let mut labels = vec![0u8; 40];
        labels[10..20].fill(1);
        let mut scores = vec![0.0; 40];
        scores[15] = 1.0;
        let b = point_adjusted_f1(&scores, &labels).unwrap().unwrap();
        assert_eq!((b.f1, b.precision, b.recall), (1.0, 1.0, 1.0));
        assert!(point_adjusted_f1(&scores, &[0; 40]).unwrap().is_none());
    }

    #[test]
    fn perfect_scorer_vus_is_one() {
        let mut labels = vec![0u8; 50];
        labels[5..9].fill(1);
        labels[30..40].fill(1);
        let scores: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        for b in 0..5 {
            assert_eq!(auc_pr_buffered(&scores, &labels, b).unwrap(), Some(1.0));
        }
        assert_eq!(vus_pr(&scores, &labels, 4).unwrap(), Some(1.0));
    }

    #[test]
    fn ramp_weights() {
        let w = buffered_weights(&[0, 0, 0, 1, 0, 0], 2);
        let third = 1.0 - 1.0 / 3.0;
        assert_eq!(w, [0.0, 1.0 - 2.0 / 3.0, third, 1.0, third, 1.0 - 2.0 / 3.0]);
        assert_eq!(default_max_buffer(&[1, 1, 1, 1, 0, 1, 1]), 2);
    }

    #[test]
    fn accuracy_extremes() {
        let logits = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&logits, &[1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn std_rules() {
        assert_eq!(mean_std(&[3.0]).1, None);
        assert_eq!(mean_std(&[2.0, 2.0, 2.0]).1, Some(0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 4.0]);
        assert_eq!(m, 7.0 / 3.0);
        let want = ((16.0 / 9.0 + 1.0 / 9.0 + 25.0 / 9.0) / 2.0f64).sqrt();
        assert!((s.unwrap() - want).abs() < 1e-15);
    }
}
