//! Flat name → array containers (safetensors layout, f64 little-endian),
//! pretrained-weight archives with a probe pair, and training checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use plotfuse_core::autograd::Tape;
use plotfuse_core::model::{Model, ModelConfig};
use plotfuse_core::nn::ParamGroup;
use plotfuse_core::train::{RunLog, TrainConfig};
use plotfuse_core::Tensor;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{read, write, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const PROBE_TOLERANCE: f64 = 1e-4;
const HEADER_KEY: &str = "plotfuse";
const PROBE_INPUT: &str = "__probe__.input";
const PROBE_OUTPUT: &str = "__probe__.output";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub shape: Vec<usize>,
    pub dtype: String,
}

pub fn array_manifest(arrays: &BTreeMap<String, Tensor>) -> BTreeMap<String, ArrayInfo> {
    arrays.iter().map(|(k, t)| (k.clone(), ArrayInfo { shape: t.shape().to_vec(), dtype: "F64".into() })).collect()
}

/// Write `arrays` with a JSON `header`. Bytes depend only on the inputs.
pub fn write_container(path: &Path, header: &Value, arrays: &BTreeMap<String, Tensor>) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = arrays
        .iter()
        .map(|(k, t)| (k.clone(), t.data().iter().flat_map(|v| v.to_le_bytes()).collect(), t.shape().to_vec()))
        .collect();
    let views = bytes
        .iter()
        .map(|(k, b, s)| Ok((k.as_str(), safetensors::tensor::TensorView::new(Dtype::F64, s.clone(), b)?)))
        .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
        .map_err(|e| Error::format(path, None, e.to_string()))?;
    let meta = HashMap::from([(HEADER_KEY.to_string(), header.to_string())]);
    let out = safetensors::serialize(views, Some(meta)).map_err(|e| Error::format(path, None, e.to_string()))?;
    write(path, &out)
}

pub fn read_container(path: &Path) -> Result<(Value, BTreeMap<String, Tensor>)> {
    let bytes = read(path)?;
    let bad = |m: String| Error::format(path, None, m);
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let header = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| bad("missing plotfuse header".into()))?;
    let header: Value = serde_json::from_str(header).map_err(|e| bad(format!("header: {e}")))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let mut arrays = BTreeMap::new();
    for (name, view) in st.tensors() {
        let data: Vec<f64> = match view.dtype() {
            Dtype::F64 => view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            Dtype::F32 => {
                view.data().chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect()
            }
            d => return Err(bad(format!("{name}: unsupported dtype {d:?}"))),
        };
        let t = Tensor::new(view.shape(), data).map_err(|e| bad(format!("{name}: {e}")))?;
        arrays.insert(name, t);
    }
    Ok((header, arrays))
}

/// Which part of a model an archive carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    VisionEncoder,
    Backbone,
}

impl Component {
    fn owns(self, name: &str, group: ParamGroup) -> bool {
        match self {
            Self::VisionEncoder => group == ParamGroup::VisionEncoder,
            Self::Backbone => name.starts_with("backbone."),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub format: String,
    pub schema_version: u32,
    pub component: Component,
    pub manifest: BTreeMap<String, ArrayInfo>,
    /// Spec of the component the weights were taken from.
    pub spec: Value,
}

/// Pretrained weights of one component plus a probe input/output pair.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightArchive {
    pub header: ArchiveHeader,
    pub weights: BTreeMap<String, Tensor>,
    pub probe_input: Tensor,
    pub probe_output: Tensor,
}

fn wave(shape: &[usize], phase: f64) -> Tensor {
    Tensor::from_fn(shape, |i| 0.5 + 0.5 * ((i as f64) * 0.37 + phase).sin())
}

/// The fixed probe input for `component` of `model`.
pub fn probe_input(model: &Model, component: Component) -> Result<Tensor> {
    let c = &model.cfg;
    match component {
        Component::VisionEncoder => {
            if !model.has_vision() {
                return Err(Error::config("model.vision", "model has no vision encoder"));
            }
            Ok(wave(&[1, 3, c.render.height, c.render.width], 0.0))
        }
        Component::Backbone => {
            let n = c.backbone.max_positions.min(8);
            Ok(wave(&[1, n, c.backbone.width], 1.0).map(|v| 2.0 * v - 1.0))
        }
    }
}

pub fn probe_output(model: &Model, component: Component, input: &Tensor) -> Result<Tensor> {
    match component {
        Component::VisionEncoder => Ok(model.encode_features(input)?),
        Component::Backbone => {
            let mut tape = Tape::new();
            let z = tape.constant(input.clone());
            let (y, _) = model.backbone.forward(&mut tape, &model.store, z)?;
            Ok(tape.value(y).clone())
        }
    }
}

impl WeightArchive {
    /// Take `component` out of `model`, probe included.
    pub fn export(model: &Model, component: Component) -> Result<Self> {
        let weights: BTreeMap<String, Tensor> = model
            .store
            .iter()
            .filter(|(_, p)| component.owns(&p.name, p.group))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        let probe_input = probe_input(model, component)?;
        let probe_output = probe_output(model, component, &probe_input)?;
        let spec = match component {
            Component::VisionEncoder => serde_json::to_value(&model.cfg.vision),
            Component::Backbone => serde_json::to_value(&model.cfg.backbone),
        }
        .expect("spec serializes");
        Ok(Self {
            header: ArchiveHeader {
                format: "plotfuse-weights".into(),
                schema_version: SCHEMA_VERSION,
                component,
                manifest: array_manifest(&weights),
                spec,
            },
            weights,
            probe_input,
            probe_output,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays = self.weights.clone();
        arrays.insert(PROBE_INPUT.into(), self.probe_input.clone());
        arrays.insert(PROBE_OUTPUT.into(), self.probe_output.clone());
        let header = serde_json::to_value(&self.header).expect("header serializes");
        write_container(path, &header, &arrays)
    }

    /// Read and check the archive against its own manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let (header, mut arrays) = read_container(path)?;
        let bad = |m: String| Error::format(path, None, m);
        let header: ArchiveHeader = serde_json::from_value(header).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != "plotfuse-weights" {
            return Err(bad(format!("not a weight archive (format {:?})", header.format)));
        }
        if header.schema_version > SCHEMA_VERSION {
            return Err(bad(format!("schema version {} is newer than {SCHEMA_VERSION}", header.schema_version)));
        }
        let probe_input = arrays.remove(PROBE_INPUT).ok_or_else(|| bad("missing probe input".into()))?;
        let probe_output = arrays.remove(PROBE_OUTPUT).ok_or_else(|| bad("missing probe output".into()))?;
        for (k, info) in &header.manifest {
            let t = arrays.get(k).ok_or_else(|| bad(format!("manifest lists {k}, archive lacks it")))?;
            if t.shape() != info.shape.as_slice() {
                return Err(bad(format!("{k}: stored shape {:?}, manifest says {:?}", t.shape(), info.shape)));
            }
        }
        if let Some(extra) = arrays.keys().find(|k| !header.manifest.contains_key(*k)) {
            return Err(bad(format!("{extra} is not in the manifest")));
        }
        Ok(Self { header, weights: arrays, probe_input, probe_output })
    }

    /// Copy the weights into `model` and re-run the probe. Returns the largest
    /// absolute probe deviation, which must stay within [`PROBE_TOLERANCE`].
    pub fn install(&self, model: &mut Model, source: &Path) -> Result<f64> {
        let c = self.header.component;
        let owned = model.store.iter().filter(|(_, p)| c.owns(&p.name, p.group)).count();
        if owned != self.weights.len() {
            return Err(Error::format(
                source,
                None,
                format!("archive has {} {c:?} arrays, model has {owned}", self.weights.len()),
            ));
        }
        model.store.load_named(&self.weights).map_err(|e| Error::format(source, None, e.to_string()))?;
        let out = probe_output(model, c, &self.probe_input).map_err(|e| Error::format(source, None, e.to_string()))?;
        if out.shape() != self.probe_output.shape() {
            return Err(Error::format(source, None, "probe output shape differs"));
        }
        let dev = out.data().iter().zip(self.probe_output.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if dev.is_nan() || dev > PROBE_TOLERANCE {
            return Err(Error::format(
                source,
                None,
                format!("probe output deviates by {dev:e} (tolerance {PROBE_TOLERANCE:e})"),
            ));
        }
        Ok(dev)
    }
}

/// Model weights, configs and training log in one file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub run_log: RunLog,
    pub weights: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    schema_version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    run_log: RunLog,
    manifest: BTreeMap<String, ArrayInfo>,
}

impl Checkpoint {
    pub fn of(model: &Model, train_config: &TrainConfig, run_log: &RunLog) -> Self {
        Self {
            model_config: model.cfg.clone(),
            train_config: train_config.clone(),
            run_log: run_log.clone(),
            weights: model.store.named_values(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format: "plotfuse-checkpoint".into(),
            schema_version: SCHEMA_VERSION,
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            run_log: self.run_log.clone(),
            manifest: array_manifest(&self.weights),
        };
        write_container(path, &serde_json::to_value(header).expect("header serializes"), &self.weights)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing { what: "checkpoint", path: path.display().to_string() });
        }
        let (header, weights) = read_container(path)?;
        let h: CheckpointHeader =
            serde_json::from_value(header).map_err(|e| Error::format(path, None, format!("header: {e}")))?;
        if h.format != "plotfuse-checkpoint" {
            return Err(Error::format(path, None, format!("not a checkpoint (format {:?})", h.format)));
        }
        if array_manifest(&weights) != h.manifest {
            return Err(Error::format(path, None, "stored arrays disagree with the manifest"));
        }
        Ok(Self { model_config: h.model_config, train_config: h.train_config, run_log: h.run_log, weights })
    }

    /// Rebuild the model with the stored weights and policy flags.
    pub fn model(&self) -> Result<Model> {
        let mut m = Model::new(self.model_config.clone())?;
        let n = m.store.load_named(&self.weights)?;
        if n != m.store.len() {
            return Err(Error::Format {
                path: "<checkpoint>".into(),
                line: None,
                message: format!("checkpoint restores {n} of {} parameters", m.store.len()),
            });
        }
        Ok(m)
    }
}
