//! Metric reports on disk (JSON + flat CSV), run manifests and timing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use plotfuse_core::metrics::MetricReport;
use plotfuse_core::train::Clock;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{read, write, Error, Result};

pub const REPORT_SCHEMA: u32 = 1;
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub reports: Vec<MetricReport>,
}

pub fn axes_label(axes: &BTreeMap<String, String>) -> String {
    axes.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

/// Flat CSV: one row per value, report mean and std repeated on each row.
pub fn reports_csv(reports: &[MetricReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format { path: "<csv>".into(), line: None, message: e.to_string() };
    w.write_record(["task", "metric", "axes", "label", "seed", "value", "mean", "std", "n"]).map_err(err)?;
    for r in reports {
        for v in &r.values {
            w.write_record([
                r.task.clone(),
                r.metric.clone(),
                axes_label(&r.axes),
                v.label.clone(),
                v.seed.map_or(String::new(), |s| s.to_string()),
                format!("{:?}", v.value),
                format!("{:?}", r.mean),
                fmt_opt(r.std),
                r.values.len().to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Format { path: "<csv>".into(), line: None, message: e.to_string() })
}

/// Write `<dir>/<stem>.json` and `<dir>/<stem>.csv`; returns both paths.
pub fn save_reports(dir: &Path, stem: &str, reports: &[MetricReport]) -> Result<[PathBuf; 2]> {
    let file = ReportFile { schema_version: REPORT_SCHEMA, reports: reports.to_vec() };
    let json = dir.join(format!("{stem}.json"));
    let csv = dir.join(format!("{stem}.csv"));
    let mut text = serde_json::to_string_pretty(&file).expect("reports serialize");
    text.push('\n');
    write(&json, text.as_bytes())?;
    write(&csv, &reports_csv(reports)?)?;
    Ok([json, csv])
}

pub fn load_reports(path: &Path) -> Result<ReportFile> {
    let bytes = read(path)?;
    let f: ReportFile =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, Some(e.line()), e.to_string()))?;
    if f.schema_version > REPORT_SCHEMA {
        return Err(Error::format(
            path,
            None,
            format!("schema version {} is newer than {REPORT_SCHEMA}", f.schema_version),
        ));
    }
    Ok(f)
}

/// Milliseconds since construction.
#[derive(Clone, Copy, Debug)]
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub wall_ms: f64,
}

/// Everything needed to re-run a command and check its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Command-specific inputs, e.g. the few-shot fraction.
    pub params: BTreeMap<String, String>,
    pub stages: Vec<StageTime>,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: config.hash(),
            seeds: config.train.seeds.clone(),
            params: BTreeMap::new(),
            stages: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
            config: config.clone(),
        }
    }

    /// Run `f`, recording its wall time under `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.stages.push(StageTime { stage: stage.into(), wall_ms: t.elapsed().as_secs_f64() * 1e3 });
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write(path, text.as_bytes())
    }

    /// Load a manifest and check that its config still hashes to the
    /// recorded value.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let m: RunManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Config {
            source_path: Some(path.display().to_string()),
            line: Some(e.line()),
            field: None,
            message: e.to_string(),
        })?;
        let h = m.config.hash();
        if h != m.config_hash {
            return Err(Error::Config {
                source_path: Some(path.display().to_string()),
                line: None,
                field: Some("config_hash".into()),
                message: format!("config hashes to {h}, manifest records {}", m.config_hash),
            });
        }
        Ok(m)
    }
}
