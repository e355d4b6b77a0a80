//! The subcommands: train, eval, render, sweep, zeroshot, fewshot, attn and
//! report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use plotfuse_core::autograd::Tape;
use plotfuse_core::backbone::{attention_maps, AttentionAccumulator};
use plotfuse_core::data::{few_shot_subset, SubsetRule};
use plotfuse_core::experiment::{
    autoregressive_errors, evaluate_classification, evaluate_forecast, forecast_samples, labeled_samples, score_series,
    window_samples, EVAL_CHUNK,
};
use plotfuse_core::heads::Task;
use plotfuse_core::metrics::{aggregate, default_max_buffer, point_adjusted_f1, vus_pr, MetricReport};
use plotfuse_core::model::Model;
use plotfuse_core::prelude::{Layout, SeriesInstance};
use plotfuse_core::raster::rasterize;
use plotfuse_core::train::{train_task, RunLog, Samples};
use plotfuse_core::vision::WeightsSource;

use crate::archive::{Checkpoint, Component, WeightArchive};
use crate::config::{AxisValue, ExperimentConfig};
use crate::dataset::{load_splits, Splits};
use crate::error::{write, Error, Result};
use crate::formats::save_npy;
use crate::image::{heatmap, save_png};
use crate::report::{axes_label, load_reports, save_reports, RunManifest, WallClock};

/// Metric name → value for one seed.
pub type Metrics = BTreeMap<String, f64>;

pub struct SeedRun {
    pub seed: u64,
    pub metrics: Metrics,
    pub log: RunLog,
    pub model: Model,
}

/// Window length the config will use on `splits`.
pub fn lookback(cfg: &ExperimentConfig) -> usize {
    match cfg.task.task {
        Task::Forecasting => cfg.model.seq_len.unwrap_or(0),
        _ => 0,
    }
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits> {
    load_splits(&cfg.data, cfg.task.task, lookback(cfg))
}

/// Build a model for `splits`, installing pretrained components.
pub fn build_model(cfg: &ExperimentConfig, splits: &Splits, seed: u64) -> Result<Model> {
    let (c, len) = splits.shape()?;
    let mc = cfg.model_config(c, len, seed)?;
    let mut model = Model::new(mc)?;
    let parts = [
        (cfg.vision().map(|v| v.weights_source), cfg.model.vision_archive.as_ref()),
        (Some(cfg.model.backbone.weights_source), cfg.model.backbone_archive.as_ref()),
    ];
    for (source, path) in parts {
        if let (Some(WeightsSource::ExternalArchive), Some(p)) = (source, path) {
            WeightArchive::load(p)?.install(&mut model, p)?;
        }
    }
    model.apply_policy(cfg.train.policy);
    Ok(model)
}

fn train_samples(model: &Model, cfg: &ExperimentConfig, part: &[SeriesInstance]) -> Result<Samples> {
    Ok(match cfg.task.task {
        Task::Classification => labeled_samples(model, part)?,
        Task::AnomalyDetection => window_samples(model, part, cfg.eval.ad_train_stride.unwrap_or(model.cfg.seq_len))?,
        Task::Forecasting => forecast_samples(model, part, cfg.eval.forecast_stride)?,
    })
}

/// Test metrics of a trained model.
pub fn evaluate(model: &Model, cfg: &ExperimentConfig, test: &[SeriesInstance]) -> Result<Metrics> {
    let mut m = Metrics::new();
    match cfg.task.task {
        Task::Classification => {
            m.insert("accuracy".into(), evaluate_classification(model, test)?);
        }
        Task::AnomalyDetection => {
            let (mut scores, mut labels) = (Vec::new(), Vec::new());
            for s in test {
                scores.extend(score_series(model, s, cfg.eval.ad_score_stride)?);
                labels.extend_from_slice(s.step_labels().ok_or_else(|| {
                    Error::Core(plotfuse_core::Error::Data("anomaly test series has no step labels".into()))
                })?);
            }
            let buffer = cfg.eval.max_buffer.unwrap_or_else(|| default_max_buffer(&labels));
            if let Some(f) = point_adjusted_f1(&scores, &labels)? {
                m.insert("pa_f1".into(), f.f1);
            }
            if let Some(v) = vus_pr(&scores, &labels, buffer)? {
                m.insert("vus_pr".into(), v);
            }
        }
        Task::Forecasting => {
            let (mse, mae, pmse) = evaluate_forecast(model, test, cfg.eval.forecast_stride)?;
            m.insert("mse".into(), mse);
            m.insert("mae".into(), mae);
            m.insert("persistence_mse".into(), pmse);
            if !cfg.eval.ar_horizons.is_empty() {
                let mut sum = BTreeMap::new();
                for s in test {
                    for (h, e) in autoregressive_errors(model, s, &cfg.eval.ar_horizons, cfg.eval.forecast_stride)? {
                        *sum.entry(h).or_insert(0.0) += e / test.len() as f64;
                    }
                }
                for (h, e) in sum {
                    m.insert(format!("ar_mse_h{h}"), e);
                }
            }
        }
    }
    Ok(m)
}

/// Train on `train` for one seed and score on `test`.
pub fn run_seed(cfg: &ExperimentConfig, train: &Splits, test: &[SeriesInstance], seed: u64) -> Result<SeedRun> {
    let mut model = build_model(cfg, train, seed)?;
    let tr = train_samples(&model, cfg, &train.train)?;
    let va = match (cfg.task.task, train.val()) {
        (Task::AnomalyDetection, _) | (_, None) => None,
        (_, Some(v)) => Some(train_samples(&model, cfg, v)?),
    };
    let log = train_task(&mut model, &tr, va.as_ref(), &cfg.train, seed, &WallClock::new())?;
    let metrics = evaluate(&model, cfg, test)?;
    Ok(SeedRun { seed, metrics, log, model })
}

/// Run `f` over `items` on up to `jobs` threads; results keep item order.
pub fn parallel<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no poisoned lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("no poisoned lock").into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// One report per metric across seed runs.
pub fn reports_of(task: Task, axes: &BTreeMap<String, String>, runs: &[(u64, Metrics)]) -> Vec<MetricReport> {
    let mut names: Vec<&String> = runs.iter().flat_map(|(_, m)| m.keys()).collect();
    names.sort();
    names.dedup();
    names
        .into_iter()
        .map(|name| {
            let per: Vec<(u64, f64)> = runs.iter().filter_map(|(s, m)| m.get(name).map(|v| (*s, *v))).collect();
            MetricReport::from_seeds(task.as_str(), name, axes.clone(), &per)
        })
        .collect()
}

fn finish(mut manifest: RunManifest, dir: &Path, reports: &[MetricReport]) -> Result<RunManifest> {
    for p in save_reports(dir, "report", reports)? {
        manifest.outputs.push(p.display().to_string());
    }
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Train every seed, save checkpoints and the test report.
pub fn train(cfg: &ExperimentConfig) -> Result<RunManifest> {
    train_like(cfg, "train", cfg.out_dir(), None, BTreeMap::new())
}

fn train_like(
    cfg: &ExperimentConfig,
    command: &str,
    dir: PathBuf,
    fraction: Option<f64>,
    axes: BTreeMap<String, String>,
) -> Result<RunManifest> {
    let mut man = RunManifest::new(command, cfg);
    let splits = man.time("load_data", || load_data(cfg))?;
    man.notes.extend(splits.notes.iter().cloned());
    let target = match (command, &cfg.target) {
        ("zeroshot", Some(t)) => Some(man.time("load_target", || load_splits(t, cfg.task.task, lookback(cfg)))?),
        ("zeroshot", None) => return Err(Error::config("target", "zeroshot needs a [target] dataset")),
        _ => None,
    };
    let test = target.as_ref().map_or(&splits.test, |t| &t.test);
    if let Some(f) = fraction {
        man.params.insert("fraction".into(), format!("{f}"));
    }
    let seeds = cfg.train.seeds.clone();
    let runs = man.time("train_eval", || {
        parallel(&seeds, cfg.jobs, |&seed| {
            let mut mine = splits.clone();
            if let Some(f) = fraction {
                let rule = match cfg.task.task {
                    Task::Classification => SubsetRule::Stratified,
                    _ => SubsetRule::Chronological,
                };
                let sub = few_shot_subset(&splits.train, f, rule, seed)?;
                mine.train = sub.instances;
                mine.notes = sub.adjustments;
            }
            let run = run_seed(cfg, &mine, test, seed)?;
            let sdir = dir.join(format!("seed_{seed}"));
            let ck = sdir.join("checkpoint.safetensors");
            Checkpoint::of(&run.model, &cfg.train, &run.log).save(&ck)?;
            let mut files = vec![ck];
            let mut parts = vec![(Component::Backbone, "backbone")];
            if run.model.has_vision() {
                parts.push((Component::VisionEncoder, "vision"));
            }
            for (c, name) in parts {
                let p = sdir.join(format!("{name}.safetensors"));
                WeightArchive::export(&run.model, c)?.save(&p)?;
                files.push(p);
            }
            Ok((run.seed, run.metrics, files, mine.notes))
        })
    })?;
    let mut per_seed = Vec::new();
    for (seed, metrics, files, notes) in runs {
        man.outputs.extend(files.iter().map(|f| f.display().to_string()));
        man.notes.extend(notes.into_iter().map(|n| format!("seed {seed}: {n}")));
        per_seed.push((seed, metrics));
    }
    let reports = reports_of(cfg.task.task, &axes, &per_seed);
    finish(man, &dir, &reports)
}

/// Score saved checkpoints on the test split.
pub fn eval(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<RunManifest> {
    let dir = cfg.out_dir().join("eval");
    let mut man = RunManifest::new("eval", cfg);
    let paths: Vec<PathBuf> = if checkpoints.is_empty() {
        cfg.train.seeds.iter().map(|s| cfg.out_dir().join(format!("seed_{s}")).join("checkpoint.safetensors")).collect()
    } else {
        checkpoints.to_vec()
    };
    if let Some(p) = paths.iter().find(|p| !p.exists()) {
        return Err(Error::Missing { what: "checkpoint", path: p.display().to_string() });
    }
    let splits = man.time("load_data", || load_data(cfg))?;
    let runs = man.time("eval", || {
        parallel(&paths, cfg.jobs, |p| {
            let ck = Checkpoint::load(p)?;
            let model = ck.model()?;
            Ok((ck.run_log.seed, evaluate(&model, cfg, &splits.test)?))
        })
    })?;
    man.seeds = runs.iter().map(|r| r.0).collect();
    man.params
        .insert("checkpoints".into(), paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","));
    let reports = reports_of(cfg.task.task, &BTreeMap::new(), &runs);
    finish(man, &dir, &reports)
}

/// One PNG per layout for the first `count` test windows.
pub fn render(cfg: &ExperimentConfig, count: usize) -> Result<RunManifest> {
    let dir = cfg.out_dir().join("render");
    let mut man = RunManifest::new("render", cfg);
    let splits = man.time("load_data", || load_data(cfg))?;
    let (c, len) = splits.shape()?;
    let l = cfg.model.seq_len.unwrap_or(len);
    let mut windows = Vec::new();
    'outer: for s in splits.test.iter().chain(&splits.train) {
        let mut start = 0;
        while start + l <= s.len() {
            windows.push(s.values().slice_axis(0, start, l));
            if windows.len() == count {
                break 'outer;
            }
            start += l;
        }
    }
    if windows.is_empty() {
        return Err(Error::Core(plotfuse_core::Error::Data(format!("no {l}-step window to render"))));
    }
    let (mut outputs, mut notes) = (Vec::new(), Vec::new());
    man.time("render", || -> Result<()> {
        for (i, w) in windows.iter().enumerate() {
            for layout in [Layout::Horizontal, Layout::Grid] {
                let rc = plotfuse_core::raster::RenderConfig { layout, ..cfg.model.render.clone() };
                let plot = rasterize(w, &rc)?;
                let name = match layout {
                    Layout::Horizontal => "horizontal",
                    Layout::Grid => "grid",
                };
                let p = dir.join(format!("window_{i}_{name}.png"));
                save_png(&p, &plot.pixels)?;
                outputs.push(p.display().to_string());
                notes.extend(plot.advisories.iter().map(|a| format!("window {i} {name}: {a}")));
            }
        }
        Ok(())
    })?;
    man.outputs.extend(outputs);
    man.notes.extend(notes);
    man.params.insert("channels".into(), c.to_string());
    man.params.insert("count".into(), windows.len().to_string());
    man.save(&dir.join("manifest.json"))?;
    Ok(man)
}

/// A sweep cell's directory name, e.g. `003_fusion=late_policy=freeze`.
fn cell_name(i: usize, cell: &[AxisValue]) -> String {
    let parts: Vec<String> = cell.iter().map(|v| format!("{}={}", v.axis(), v.label())).collect();
    if parts.is_empty() {
        format!("{i:03}")
    } else {
        format!("{i:03}_{}", parts.join("_"))
    }
}

/// Every cell of the axis product, every seed. Writes per-cell reports, a
/// row table (cells × seeds) and per-axis aggregates.
pub fn sweep(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let dir = cfg.out_dir().join("sweep");
    let mut man = RunManifest::new("sweep", cfg);
    let cells = cfg.sweep.cells();
    let mut configs = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut c = cfg.clone();
        for v in cell {
            c = c.with_axis(*v)?;
        }
        configs.push(c);
    }
    let splits = man.time("load_data", || load_data(cfg))?;
    for c in &configs {
        let (ch, len) = splits.shape()?;
        c.model_config(ch, len, 0)?;
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|i| cfg.train.seeds.iter().map(move |&s| (i, s))).collect();
    let results = man.time("train_eval", || {
        parallel(&jobs, cfg.jobs, |&(i, seed)| Ok(run_seed(&configs[i], &splits, &splits.test, seed)?.metrics))
    })?;

    let mut rows = csv::Writer::from_writer(Vec::new());
    let axis_names: Vec<&str> = cfg.sweep.axes().iter().map(|a| a[0].axis()).collect();
    let metric_names: Vec<String> = {
        let mut n: Vec<String> = results.iter().flat_map(|m| m.keys().cloned()).collect();
        n.sort();
        n.dedup();
        n
    };
    let csv_err = |e: csv::Error| Error::Format { path: "rows.csv".into(), line: None, message: e.to_string() };
    let header: Vec<String> = std::iter::once("cell".to_string())
        .chain(axis_names.iter().map(|s| s.to_string()))
        .chain(std::iter::once("seed".into()))
        .chain(metric_names.iter().cloned())
        .collect();
    rows.write_record(&header).map_err(csv_err)?;
    let mut all_reports = Vec::new();
    let mut by_cell: Vec<Vec<(u64, Metrics)>> = vec![Vec::new(); cells.len()];
    for (&(i, seed), metrics) in jobs.iter().zip(&results) {
        let mut rec = vec![cell_name(i, &cells[i])];
        rec.extend(cells[i].iter().map(AxisValue::label));
        rec.push(seed.to_string());
        rec.extend(metric_names.iter().map(|n| metrics.get(n).map_or(String::new(), |v| format!("{v:?}"))));
        rows.write_record(&rec).map_err(csv_err)?;
        by_cell[i].push((seed, metrics.clone()));
    }
    for (i, cell) in cells.iter().enumerate() {
        let axes: BTreeMap<String, String> = cell.iter().map(|v| (v.axis().to_string(), v.label())).collect();
        let reports = reports_of(cfg.task.task, &axes, &by_cell[i]);
        let cdir = dir.join("cells").join(cell_name(i, cell));
        let mut cm = RunManifest::new("sweep_cell", &configs[i]);
        cm.params = axes.clone();
        finish(cm, &cdir, &reports)?;
        all_reports.extend(reports);
    }
    let rows_path = dir.join("rows.csv");
    write(
        &rows_path,
        &rows.into_inner().map_err(|e| Error::Format {
            path: "rows.csv".into(),
            line: None,
            message: e.to_string(),
        })?,
    )?;
    man.outputs.push(rows_path.display().to_string());

    let mut aggregates = Vec::new();
    for axis in &axis_names {
        let mut groups: BTreeMap<(String, String), Vec<MetricReport>> = BTreeMap::new();
        for r in &all_reports {
            let mut rest = r.axes.clone();
            rest.remove(*axis);
            groups.entry((r.metric.clone(), axes_label(&rest))).or_default().push(r.clone());
        }
        for g in groups.values() {
            aggregates.push(aggregate(g, axis)?);
        }
    }
    for p in save_reports(&dir, "aggregate", &aggregates)? {
        man.outputs.push(p.display().to_string());
    }
    man.params.insert("cells".into(), cells.len().to_string());
    man.params.insert("rows".into(), jobs.len().to_string());
    finish(man, &dir, &all_reports)
}

/// Train on the source dataset, score on the target's test split.
pub fn zeroshot(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let t = cfg.target.as_ref().ok_or_else(|| Error::config("target", "zeroshot needs a [target] dataset"))?;
    let label = format!("{}→{}", cfg.data.label(), t.label());
    let axes = BTreeMap::from([("transfer".to_string(), label)]);
    train_like(cfg, "zeroshot", cfg.out_dir().join("zeroshot"), None, axes)
}

/// Train on `fraction` of the training split.
pub fn fewshot(cfg: &ExperimentConfig, fraction: f64) -> Result<RunManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("--fraction", format!("{fraction} is not in (0, 1]")));
    }
    let axes = BTreeMap::from([("fraction".to_string(), format!("{fraction}"))]);
    train_like(cfg, "fewshot", cfg.out_dir().join("fewshot"), Some(fraction), axes)
}

/// Average attention maps of a checkpoint over test windows.
pub fn attn(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<RunManifest> {
    let dir = cfg.out_dir().join("attn");
    let mut man = RunManifest::new("attn", cfg);
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir().join(format!("seed_{}", cfg.train.seeds[0])).join("checkpoint.safetensors"));
    let ck = Checkpoint::load(&path)?;
    let model = ck.model()?;
    man.seeds = vec![ck.run_log.seed];
    man.params.insert("checkpoint".into(), path.display().to_string());
    let splits = man.time("load_data", || load_data(cfg))?;
    let samples = match cfg.task.task {
        Task::Classification => labeled_samples(&model, &splits.test)?,
        Task::AnomalyDetection => window_samples(&model, &splits.test, model.cfg.seq_len)?,
        Task::Forecasting => forecast_samples(&model, &splits.test, model.cfg.seq_len)?,
    };
    let n = samples.len().min(cfg.eval.attn_windows.max(1));
    let mean = man.time("attention", || -> Result<_> {
        let mut acc = AttentionAccumulator::default();
        let mut start = 0;
        while start < n {
            let rows: Vec<usize> = (start..n.min(start + EVAL_CHUNK)).collect();
            let part = samples.select(&rows);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &part.x, part.visual.as_ref())?;
            acc.add(&attention_maps(&tape, &out.attention)?, rows.len())?;
            start += rows.len();
        }
        Ok(acc.mean())
    })?;
    let Some(mean) = mean else {
        return Err(Error::Core(plotfuse_core::Error::Data("model has no attention layers".into())));
    };
    let npy = dir.join("attention.npy");
    save_npy(&npy, &mean)?;
    man.outputs.push(npy.display().to_string());
    let (layers, tokens) = (mean.dim(0), mean.dim(1));
    let cell = (256 / tokens.max(1)).max(1);
    for l in 0..layers {
        let map = mean.slice_axis(0, l, 1).reshape(&[tokens, tokens])?;
        let p = dir.join(format!("attention_layer{l}.png"));
        save_png(&p, &heatmap(&map, cell)?)?;
        man.outputs.push(p.display().to_string());
    }
    man.params.insert("windows".into(), n.to_string());
    man.save(&dir.join("manifest.json"))?;
    Ok(man)
}

/// Collect report files (or directories holding `report.json`) into one
/// table of mean ± std per configuration and metric.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            collect_reports(p, &mut files)?;
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Missing {
            what: "report",
            path: inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "),
        });
    }
    let mut reports = Vec::new();
    for f in &files {
        reports.extend(load_reports(f)?.reports);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format { path: "table.csv".into(), line: None, message: e.to_string() };
    w.write_record(["task", "configuration", "metric", "mean", "std", "n"]).map_err(err)?;
    let mut text = String::new();
    let width = reports.iter().map(|r| axes_label(&r.axes).len()).max().unwrap_or(0).max(13);
    text += &format!(
        "{:<18} {:<width$} {:<16} {:>12} {:>12} {:>3}\n",
        "task", "configuration", "metric", "mean", "std", "n"
    );
    for r in &reports {
        let conf = axes_label(&r.axes);
        let std = r.std.map_or(String::new(), |s| format!("{s:.6}"));
        w.write_record([
            r.task.clone(),
            conf.clone(),
            r.metric.clone(),
            format!("{:?}", r.mean),
            r.std.map_or(String::new(), |s| format!("{s:?}")),
            r.values.len().to_string(),
        ])
        .map_err(err)?;
        text += &format!(
            "{:<18} {:<width$} {:<16} {:>12.6} {:>12} {:>3}\n",
            r.task,
            conf,
            r.metric,
            r.mean,
            std,
            r.values.len()
        );
    }
    let csv_path = out.join("table.csv");
    let txt_path = out.join("table.txt");
    write(
        &csv_path,
        &w.into_inner().map_err(|e| Error::Format { path: "table.csv".into(), line: None, message: e.to_string() })?,
    )?;
    write(&txt_path, text.as_bytes())?;
    Ok(vec![csv_path, txt_path])
}

fn collect_reports(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> =
        std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            out.push(p);
        }
    }
    Ok(())
}
