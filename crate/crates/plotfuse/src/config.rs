//! Experiment configuration: one TOML file, layered overrides, precise errors.
//!
//! Resolution order, later wins: the file, then `PLOTFUSE_<KEY>` environment
//! variables for top-level scalars (`name`, `out_dir`, `jobs`), then
//! `--override dotted.key=value` pairs, then dedicated command-line flags.

use std::path::{Path, PathBuf};

use plotfuse_core::align::{AlignConfig, FusionPlan, FusionStage};
use plotfuse_core::backbone::{BackboneKind, BackboneSpec, TuningPolicy};
use plotfuse_core::data::{NanPolicy, SyntheticSpec};
use plotfuse_core::heads::{Task, TaskConfig};
use plotfuse_core::model::ModelConfig;
use plotfuse_core::raster::{Layout, RenderConfig};
use plotfuse_core::tokenizer::{PatchMode, TokenizerConfig};
use plotfuse_core::train::TrainConfig;
use plotfuse_core::vision::{EncoderKind, VisionEncoderSpec, WeightsSource};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "PLOTFUSE_";

/// Top-level keys that environment variables may set.
pub const ENV_KEYS: [&str; 3] = ["name", "out_dir", "jobs"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Defaults to `runs/<name>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "one")]
    pub jobs: usize,
    #[serde(default)]
    pub task: TaskConfig,
    pub data: DataSection,
    /// Second dataset for zero-shot transfer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<DataSection>,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub sweep: SweepAxes,
}

fn default_name() -> String {
    "experiment".into()
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Path of a dataset manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Generator spec; the test set uses `test_seed` (default `seed + 1`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_seed: Option<u64>,
    /// Train and validation ratios of chronological splits.
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 2],
    /// Share of classification training instances held out for validation.
    #[serde(default)]
    pub val_fraction: f64,
    /// Anomaly detection: train on a copy generated without anomalies.
    #[serde(default = "yes")]
    pub clean_train: bool,
    #[serde(default)]
    pub nan_policy: NanPolicy,
}

fn default_ratios() -> [f64; 2] {
    [0.7, 0.1]
}

impl DataSection {
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        if let Some(m) = &self.manifest {
            return m.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
        }
        "synthetic".into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub r: usize,
    /// Defaults to the backbone width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    /// Defaults to the mode the task requires.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_mode: Option<PatchMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Window length; classification defaults to the instance length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    #[serde(default)]
    pub render: RenderConfig,
    pub tokenizer: TokenizerSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vision: Option<VisionEncoderSpec>,
    /// Switch the visual branch off without deleting its section.
    #[serde(default = "yes")]
    pub use_vision: bool,
    #[serde(default)]
    pub align: AlignConfig,
    #[serde(default)]
    pub fusion: FusionPlan,
    #[serde(default)]
    pub backbone: BackboneSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vision_archive: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_archive: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Anomaly training window stride; defaults to the window length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ad_train_stride: Option<usize>,
    pub ad_score_stride: usize,
    pub forecast_stride: usize,
    /// Total horizons for autoregressive error (forecasting), empty to skip.
    pub ar_horizons: Vec<usize>,
    /// VUS buffer cap; defaults to half the mean anomaly segment length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_buffer: Option<usize>,
    /// Test windows averaged into attention maps.
    pub attn_windows: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ad_train_stride: None,
            ad_score_stride: 1,
            forecast_stride: 1,
            ar_horizons: Vec::new(),
            max_buffer: None,
            attn_windows: 64,
        }
    }
}

/// Ablation axes of `sweep`; an absent axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<Vec<Layout>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<Vec<FusionStage>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<Vec<EncoderKind>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<Vec<TuningPolicy>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_multiplier: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub color_coding: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone: Option<Vec<BackboneKind>>,
}

/// One value of one sweep axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AxisValue {
    Layout(Layout),
    Fusion(FusionStage),
    Encoder(EncoderKind),
    Policy(TuningPolicy),
    PatchMultiplier(usize),
    ColorCoding(bool),
    Backbone(BackboneKind),
}

fn snake<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

impl AxisValue {
    pub fn axis(&self) -> &'static str {
        match self {
            Self::Layout(_) => "layout",
            Self::Fusion(_) => "fusion",
            Self::Encoder(_) => "encoder",
            Self::Policy(_) => "policy",
            Self::PatchMultiplier(_) => "patch_multiplier",
            Self::ColorCoding(_) => "color_coding",
            Self::Backbone(_) => "backbone",
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Layout(v) => snake(v),
            Self::Fusion(v) => snake(v),
            Self::Encoder(v) => snake(v),
            Self::Policy(v) => v.as_str().into(),
            Self::PatchMultiplier(m) => m.to_string(),
            Self::ColorCoding(b) => if *b { "on" } else { "off" }.into(),
            Self::Backbone(v) => snake(v),
        }
    }
}

impl SweepAxes {
    /// Axes in a fixed order, each with its values.
    pub fn axes(&self) -> Vec<Vec<AxisValue>> {
        let mut out = Vec::new();
        let mut push = |v: Vec<AxisValue>| {
            if !v.is_empty() {
                out.push(v);
            }
        };
        push(self.layout.iter().flatten().map(|&v| AxisValue::Layout(v)).collect());
        push(self.fusion.iter().flatten().map(|&v| AxisValue::Fusion(v)).collect());
        push(self.encoder.iter().flatten().map(|&v| AxisValue::Encoder(v)).collect());
        push(self.policy.iter().flatten().map(|&v| AxisValue::Policy(v)).collect());
        push(self.patch_multiplier.iter().flatten().map(|&v| AxisValue::PatchMultiplier(v)).collect());
        push(self.color_coding.iter().flatten().map(|&v| AxisValue::ColorCoding(v)).collect());
        push(self.backbone.iter().flatten().map(|&v| AxisValue::Backbone(v)).collect());
        out
    }

    /// Cartesian product of all axes, first axis slowest.
    pub fn cells(&self) -> Vec<Vec<AxisValue>> {
        let mut cells = vec![Vec::new()];
        for axis in self.axes() {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    axis.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push(*v);
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

/// Token count for patch multiplier `m`: patches `m` times wider than one
/// image column, so `ceil(columns / m)` tokens.
pub fn tokens_for_multiplier(columns: usize, m: usize) -> usize {
    columns.div_ceil(m.max(1))
}

impl ExperimentConfig {
    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| Path::new("runs").join(&self.name))
    }

    pub fn vision(&self) -> Option<&VisionEncoderSpec> {
        self.model.vision.as_ref().filter(|_| self.model.use_vision)
    }

    /// Apply one sweep cell.
    pub fn with_axis(&self, v: AxisValue) -> Result<Self> {
        let mut c = self.clone();
        match v {
            AxisValue::Layout(l) => c.model.render.layout = l,
            AxisValue::Fusion(f) => c.model.fusion.stage = f,
            AxisValue::Encoder(k) => {
                let spec =
                    c.model.vision.as_mut().ok_or_else(|| {
                        Error::config("sweep.encoder", "the encoder axis needs a [model.vision] section")
                    })?;
                spec.kind = k;
            }
            AxisValue::Policy(p) => c.train.policy = p,
            AxisValue::PatchMultiplier(m) => {
                let columns = match self.vision() {
                    Some(v) => v.grid(c.model.render.height, c.model.render.width)?.1,
                    None => self.model.tokenizer.r,
                };
                c.model.tokenizer.r = tokens_for_multiplier(columns, m);
            }
            AxisValue::ColorCoding(b) => c.model.render.color_coding = b,
            AxisValue::Backbone(k) => c.model.backbone.kind = k,
        }
        Ok(c)
    }

    /// Model config for data with `channels` channels and `len`-step instances.
    pub fn model_config(&self, channels: usize, instance_len: usize, seed: u64) -> Result<ModelConfig> {
        let m = &self.model;
        let seq_len = match (m.seq_len, self.task.task) {
            (Some(l), _) => l,
            (None, Task::Classification) => instance_len,
            (None, _) => return Err(Error::config("model.seq_len", "required for this task")),
        };
        let cfg = ModelConfig {
            task: self.task.clone(),
            seq_len,
            channels,
            render: m.render.clone(),
            tokenizer: TokenizerConfig {
                r: m.tokenizer.r,
                patch_mode: m.tokenizer.patch_mode.unwrap_or(ModelConfig::patch_mode_for(self.task.task)),
                d: m.tokenizer.d.unwrap_or(m.backbone.width),
            },
            vision: self.vision().cloned(),
            align: m.align.clone(),
            fusion: m.fusion.clone(),
            backbone: m.backbone.clone(),
            policy: self.train.policy,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 over the canonical JSON of everything that affects results
    /// (`out_dir` and `jobs` excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.jobs = 1;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex(&Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse a scalar given on the command line or in the environment: a TOML
/// value if it parses as one, a plain string otherwise.
pub fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Set `dotted.key` in `table`, creating intermediate tables.
pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed override key"));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry.as_table_mut().ok_or_else(|| Error::config(key, format!("`{p}` is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Where each key of the source file sits, for error messages.
#[derive(Debug)]
pub struct SourceMap {
    path: Option<String>,
    text: String,
    doc: Option<toml_edit::Document<String>>,
}

impl SourceMap {
    pub(crate) fn new(path: Option<&Path>, text: &str) -> Self {
        Self {
            path: path.map(|p| p.display().to_string()),
            text: text.into(),
            doc: toml_edit::Document::parse(text.to_string()).ok(),
        }
    }

    fn line_at(&self, offset: usize) -> usize {
        self.text[..offset.min(self.text.len())].matches('\n').count() + 1
    }

    /// Line of `dotted` or, failing that, of its deepest present ancestor.
    pub fn line_of(&self, dotted: &str) -> Option<usize> {
        let doc = self.doc.as_ref()?;
        let mut item = doc.as_item();
        let mut best = None;
        for seg in dotted.split('.') {
            let Some(t) = item.as_table_like() else { break };
            let Some((k, v)) = t.get_key_value(seg) else { break };
            if let Some(s) = k.span().or_else(|| v.span()) {
                best = Some(s.start);
            }
            item = v;
        }
        best.map(|o| self.line_at(o))
    }

    pub fn error(&self, field: &str, message: impl Into<String>) -> Error {
        let field = field.trim_matches('.');
        let found = std::iter::once(field.to_string())
            .chain(["model.", "train.", "task."].iter().map(|p| format!("{p}{field}")))
            .find_map(|f| self.line_of(&f).map(|l| (f, l)));
        let (field, line) = match found {
            Some((f, l)) => (f, Some(l)),
            None => (field.to_string(), None),
        };
        Error::Config {
            source_path: self.path.clone(),
            line,
            field: (!field.is_empty()).then_some(field),
            message: message.into(),
        }
    }

    /// Attach a location to a config error from the core.
    pub fn locate(&self, e: Error) -> Error {
        match e {
            Error::Core(plotfuse_core::Error::Config { field, message }) => self.error(&field, message),
            Error::Config { source_path: None, field: Some(f), message, .. } => self.error(&f, message),
            e => e,
        }
    }
}

/// Everything that may override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub env: Vec<(String, String)>,
    pub pairs: Vec<String>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    /// `PLOTFUSE_*` variables from the process environment.
    pub fn from_env() -> Vec<(String, String)> {
        std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
    }
}

/// Load and resolve a config file. Relative paths inside it are resolved
/// against its directory.
pub fn load(path: &Path, ov: &Overrides) -> Result<(ExperimentConfig, SourceMap)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        source_path: Some(path.display().to_string()),
        line: None,
        field: None,
        message: format!("cannot read config: {e}"),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    resolve_text(&text, Some(path), base, ov)
}

pub fn resolve_text(
    text: &str,
    path: Option<&Path>,
    base: &Path,
    ov: &Overrides,
) -> Result<(ExperimentConfig, SourceMap)> {
    let src = SourceMap::new(path, text);
    let mut table: Table = match toml::from_str(text) {
        Ok(t) => t,
        Err(e) => {
            let line = e.span().map(|s| src.line_at(s.start));
            return Err(Error::Config {
                source_path: src.path.clone(),
                line,
                field: None,
                message: e.message().to_string(),
            });
        }
    };
    for (k, v) in &ov.env {
        let Some(key) = k.strip_prefix(ENV_PREFIX).map(str::to_ascii_lowercase) else { continue };
        if ENV_KEYS.contains(&key.as_str()) {
            let value = if key == "jobs" { parse_value(v) } else { Value::String(v.clone()) };
            table.insert(key, value);
        }
    }
    for pair in &ov.pairs {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config("--override", format!("expected key=value, got {pair:?}")))?;
        set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    if let Some(s) = ov.seed {
        set_dotted(&mut table, "train.seeds", Value::Array(vec![Value::Integer(s as i64)]))?;
    }
    if let Some(j) = ov.jobs {
        table.insert("jobs".into(), Value::Integer(j as i64));
    }
    if let Some(o) = &ov.out {
        table.insert("out_dir".into(), Value::String(o.display().to_string()));
    }

    let task: TaskConfig = match table.get("task") {
        Some(v) => de(&src, v.clone(), "task.")?,
        None => TaskConfig::default(),
    };
    let mut train = match Value::try_from(TrainConfig::for_task(task.task)) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("train config serializes to a table"),
    };
    if let Some(user) = table.get("train") {
        let user = user.as_table().ok_or_else(|| src.error("train", "must be a table"))?;
        if let Some(t) = user.get("task") {
            if t.as_str() != Some(task.task.as_str()) {
                return Err(src.error("train.task", "must match task.task (or be left out)"));
            }
        }
        for (k, v) in user {
            train.insert(k.clone(), v.clone());
        }
    }
    table.insert("train".into(), Value::Table(train));

    let mut cfg: ExperimentConfig = de(&src, Value::Table(table), "")?;
    for d in std::iter::once(&mut cfg.data).chain(cfg.target.as_mut()) {
        if let Some(m) = &mut d.manifest {
            *m = base.join(&*m);
        }
    }
    for p in [&mut cfg.model.vision_archive, &mut cfg.model.backbone_archive].into_iter().flatten() {
        *p = base.join(&*p);
    }
    validate(&cfg, &src)?;
    Ok((cfg, src))
}

fn de<T: for<'de> Deserialize<'de>>(src: &SourceMap, v: Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let p = e.path().to_string();
        let field = if p == "." { prefix.trim_end_matches('.').to_string() } else { format!("{prefix}{p}") };
        src.error(&field, e.inner().to_string())
    })
}

fn validate_data(d: &DataSection, section: &str, src: &SourceMap) -> Result<()> {
    match (&d.manifest, &d.synthetic) {
        (Some(_), Some(_)) => Err(src.error(section, "set either `manifest` or `synthetic`, not both")),
        (None, None) => Err(src.error(section, "needs a `manifest` path or a `synthetic` generator")),
        _ if !(0.0..1.0).contains(&d.val_fraction) => {
            Err(src.error(&format!("{section}.val_fraction"), "must lie in [0, 1)"))
        }
        _ => Ok(()),
    }
}

fn validate(cfg: &ExperimentConfig, src: &SourceMap) -> Result<()> {
    if cfg.jobs == 0 {
        return Err(src.error("jobs", "must be at least 1"));
    }
    validate_data(&cfg.data, "data", src)?;
    if let Some(t) = &cfg.target {
        validate_data(t, "target", src)?;
    }
    cfg.train.validate().map_err(|e| src.locate(e.into()))?;
    if cfg.train.seeds.is_empty() {
        return Err(src.error("train.seeds", "need at least one seed"));
    }
    if let Some(v) = cfg.vision() {
        if v.weights_source == WeightsSource::ExternalArchive && cfg.model.vision_archive.is_none() {
            return Err(src.error("model.vision.weights_source", "external_archive needs model.vision_archive"));
        }
    }
    if cfg.model.backbone.weights_source == WeightsSource::ExternalArchive && cfg.model.backbone_archive.is_none() {
        return Err(src.error("model.backbone.weights_source", "external_archive needs model.backbone_archive"));
    }
    if cfg.eval.ad_score_stride == 0 || cfg.eval.forecast_stride == 0 || cfg.eval.ad_train_stride == Some(0) {
        return Err(src.error("eval", "strides must be positive"));
    }
    for (name, list) in [
        ("layout", cfg.sweep.layout.as_ref().map(Vec::len)),
        ("fusion", cfg.sweep.fusion.as_ref().map(Vec::len)),
        ("encoder", cfg.sweep.encoder.as_ref().map(Vec::len)),
        ("policy", cfg.sweep.policy.as_ref().map(Vec::len)),
        ("patch_multiplier", cfg.sweep.patch_multiplier.as_ref().map(Vec::len)),
        ("color_coding", cfg.sweep.color_coding.as_ref().map(Vec::len)),
        ("backbone", cfg.sweep.backbone.as_ref().map(Vec::len)),
    ] {
        if list == Some(0) {
            return Err(src.error(&format!("sweep.{name}"), "empty axis"));
        }
    }
    if cfg.sweep.patch_multiplier.iter().flatten().any(|&m| m == 0) {
        return Err(src.error("sweep.patch_multiplier", "multipliers start at 1"));
    }
    // With generated data the shape is known now, so the model can be checked
    // before anything runs.
    if let Some(spec) = &cfg.data.synthetic {
        let (len, channels) = synthetic_shape(spec);
        cfg.model_config(channels, len, 0).map_err(|e| src.locate(e))?;
    }
    Ok(())
}

/// `(instance length, channels)` of a generator spec.
pub fn synthetic_shape(spec: &SyntheticSpec) -> (usize, usize) {
    use plotfuse_core::data::SyntheticKind as K;
    match &spec.kind {
        K::ClassMotifs { length, channels, .. }
        | K::SeasonalTrend { length, channels, .. }
        | K::AnomalyInjected { length, channels, .. } => (*length, *channels),
    }
}
