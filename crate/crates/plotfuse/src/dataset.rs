//! Dataset manifests and train/validation/test splits.
//!
//! A manifest is a TOML file. Either list the files of each split:
//!
//! ```toml
//! name = "motions"
//! task = "classification"
//! format = "ts_uea_like"
//! train = ["motions_train.ts"]
//! test = ["motions_test.ts"]
//! ```
//!
//! or name one `series` file and cut it chronologically, by explicit
//! `borders = [train_end, val_end, test_end]` or by `ratios = [train, val]`:
//!
//! ```toml
//! task = "forecasting"
//! series = "load.csv"
//! borders = [8640, 11520, 14400]
//! ```
//!
//! Paths are relative to the manifest.

use std::path::{Path, PathBuf};

use plotfuse_core::data::{
    chrono_split, make_synthetic, split_instance, NanPolicy, SplitBorders, SyntheticKind, SyntheticSpec,
};
use plotfuse_core::heads::Task;
use plotfuse_core::prelude::SeriesInstance;
use serde::{Deserialize, Serialize};

use crate::config::{DataSection, SourceMap};
use crate::error::{Error, Result};
use crate::formats::{load_series, SeriesFormat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    /// Guessed from each file's extension when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<SeriesFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nan_policy: Option<NanPolicy>,
    #[serde(default)]
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub val: Vec<PathBuf>,
    #[serde(default)]
    pub test: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub borders: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios: Option<[f64; 2]>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<(Self, SourceMap)> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Missing { what: "dataset manifest", path: path.display().to_string() }
            }
            _ => Error::io(path, e),
        })?;
        let src = SourceMap::new(Some(path), &text);
        let value: toml::Value = toml::from_str(&text).map_err(|e| Error::Config {
            source_path: Some(path.display().to_string()),
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1),
            field: None,
            message: e.message().to_string(),
        })?;
        let m: Self = serde_path_to_error::deserialize(value)
            .map_err(|e| src.error(&e.path().to_string(), e.inner().to_string()))?;
        let lists = !(m.train.is_empty() && m.val.is_empty() && m.test.is_empty());
        match (&m.series, lists) {
            (Some(_), true) => return Err(src.error("series", "use `series` or split file lists, not both")),
            (None, false) => return Err(src.error("train", "list split files or name a `series`")),
            (None, true) if m.train.is_empty() || m.test.is_empty() => {
                return Err(src.error("train", "need at least one train and one test file"))
            }
            _ => {}
        }
        if m.series.is_none() && (m.borders.is_some() || m.ratios.is_some()) {
            return Err(src.error("borders", "borders and ratios apply to a `series` file"));
        }
        if let Some([a, b, c]) = m.borders {
            if !(0 < a && a <= b && b < c) {
                return Err(src.error("borders", "need 0 < train_end <= val_end < test_end"));
            }
        }
        Ok((m, src))
    }
}

/// Instances of each split, ready for a task run.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub name: String,
    pub train: Vec<SeriesInstance>,
    pub val: Vec<SeriesInstance>,
    pub test: Vec<SeriesInstance>,
    pub notes: Vec<String>,
}

impl Splits {
    pub fn val(&self) -> Option<&[SeriesInstance]> {
        (!self.val.is_empty()).then_some(self.val.as_slice())
    }

    /// `(channels, length of the first training instance)`.
    pub fn shape(&self) -> Result<(usize, usize)> {
        let s =
            self.train.first().ok_or_else(|| Error::Core(plotfuse_core::Error::Data("empty training split".into())))?;
        Ok((s.channels(), s.len()))
    }

    fn hold_out(&mut self, fraction: f64) {
        if fraction > 0.0 && self.val.is_empty() && self.train.len() > 1 {
            let n = ((self.train.len() as f64 * fraction).ceil() as usize).clamp(1, self.train.len() - 1);
            self.val = self.train.split_off(self.train.len() - n);
            self.notes.push(format!("held out the last {n} training instances for validation"));
        }
    }
}

fn chrono(
    instances: &[SeriesInstance],
    borders: impl Fn(usize) -> Result<SplitBorders>,
    lookback: usize,
) -> Result<Splits> {
    let mut s = Splits::default();
    for inst in instances {
        let b = borders(inst.len())?;
        let [tr, va, te] = split_instance(inst, &b, lookback);
        s.train.push(tr);
        if !b.val.is_empty() {
            s.val.push(va);
        }
        s.test.push(te);
    }
    Ok(s)
}

/// Load the splits of `section` for `task`. Forecasting validation and test
/// parts reach `lookback` steps back across their borders.
pub fn load_splits(section: &DataSection, task: Task, lookback: usize) -> Result<Splits> {
    let mut splits = match (&section.manifest, &section.synthetic) {
        (Some(path), _) => from_manifest(path, section, task, lookback)?,
        (None, Some(spec)) => from_synthetic(spec, section, task, lookback)?,
        (None, None) => return Err(Error::config("data", "needs a `manifest` path or a `synthetic` generator")),
    };
    if task == Task::Classification {
        splits.hold_out(section.val_fraction);
    }
    if splits.name.is_empty() {
        splits.name = section.label();
    }
    Ok(splits)
}

fn from_manifest(path: &Path, section: &DataSection, task: Task, lookback: usize) -> Result<Splits> {
    let (m, src) = DatasetManifest::load(path)?;
    if let Some(t) = m.task {
        if t != task {
            return Err(src.error("task", format!("dataset is for {}, config runs {}", t.as_str(), task.as_str())));
        }
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let policy = m.nan_policy.unwrap_or(section.nan_policy);
    let mut notes = Vec::new();
    let mut read = |f: &Path| -> Result<Vec<SeriesInstance>> {
        let full = base.join(f);
        let format = m
            .format
            .or_else(|| SeriesFormat::from_path(&full))
            .ok_or_else(|| src.error("format", format!("cannot tell the format of {}", f.display())))?;
        let loaded = load_series(&full, format, policy)?;
        for (i, r) in &loaded.imputed {
            notes.push(format!("{}: instance {i}: imputed rows {:?}", f.display(), r.imputed_rows));
        }
        Ok(loaded.instances)
    };
    let mut splits = if let Some(series) = &m.series {
        let all = read(series)?;
        if task == Task::Classification {
            let [tr, va] = m.ratios.unwrap_or(section.ratios);
            let n = all.len();
            let a = (n as f64 * tr).floor() as usize;
            let b = a + (n as f64 * va).floor() as usize;
            if a == 0 || b >= n {
                return Err(src.error("ratios", format!("{n} instances leave an empty train or test split")));
            }
            Splits { train: all[..a].to_vec(), val: all[a..b].to_vec(), test: all[b..].to_vec(), ..Splits::default() }
        } else if let Some([a, b, c]) = m.borders {
            chrono(
                &all,
                |len| {
                    if c > len {
                        return Err(src.error("borders", format!("test_end {c} exceeds series length {len}")));
                    }
                    Ok(SplitBorders { train: 0..a, val: a..b, test: b..c })
                },
                lookback,
            )?
        } else {
            let [tr, va] = m.ratios.unwrap_or(section.ratios);
            chrono(&all, |len| Ok(chrono_split(len, tr, va)?), lookback)?
        }
    } else {
        let mut load_all = |files: &[PathBuf]| -> Result<Vec<SeriesInstance>> {
            let mut out = Vec::new();
            for f in files {
                out.extend(read(f)?);
            }
            Ok(out)
        };
        Splits { train: load_all(&m.train)?, val: load_all(&m.val)?, test: load_all(&m.test)?, ..Splits::default() }
    };
    splits.notes = notes;
    splits.name = section.name.clone().or(m.name).unwrap_or_default();
    check_schema(&splits)?;
    Ok(splits)
}

fn check_schema(s: &Splits) -> Result<()> {
    let all: Vec<SeriesInstance> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
    plotfuse_core::data::check_channel_schema(&all)?;
    Ok(())
}

fn from_synthetic(spec: &SyntheticSpec, section: &DataSection, task: Task, lookback: usize) -> Result<Splits> {
    let test_spec = SyntheticSpec { seed: section.test_seed.unwrap_or(spec.seed + 1), ..spec.clone() };
    let mut notes = Vec::new();
    let mut gen = |s: &SyntheticSpec| -> Result<Vec<SeriesInstance>> {
        let d = make_synthetic(s)?;
        notes.extend(d.warnings);
        Ok(d.instances)
    };
    let splits = match task {
        Task::Classification => Splits { train: gen(spec)?, test: gen(&test_spec)?, ..Splits::default() },
        Task::AnomalyDetection => {
            let mut train_spec = spec.clone();
            if let (true, SyntheticKind::AnomalyInjected { n_segments, n_spikes, .. }) =
                (section.clean_train, &mut train_spec.kind)
            {
                *n_segments = 0;
                *n_spikes = 0;
            }
            Splits { train: gen(&train_spec)?, test: gen(&test_spec)?, ..Splits::default() }
        }
        Task::Forecasting => {
            let [tr, va] = section.ratios;
            chrono(&gen(spec)?, |len| Ok(chrono_split(len, tr, va)?), lookback)?
        }
    };
    Ok(Splits { notes, ..splits })
}
