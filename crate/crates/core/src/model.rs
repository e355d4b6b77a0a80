//! Pipeline assembly: tokenizer, optional vision branch, fusion, backbone and
//! head over one shared parameter store.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{fuse_early, fuse_late, temporal_align, AlignConfig, FusionPlan, FusionStage};
use crate::autograd::{Tape, Var};
use crate::backbone::{apply_tuning_policy, Backbone, BackboneSpec, TuningPolicy};
use crate::data::BatchLabels;
use crate::error::{Error, Result};
use crate::heads::{loss_cls, loss_recon, AnomalyHead, ClassifyHead, ForecastHead, Head, Task, TaskConfig};
use crate::nn::{ParamGroup, ParamStore};
use crate::raster::{rasterize_batch, Layout, RenderConfig};
use crate::tensor::Tensor;
use crate::tokenizer::{
    patchify, revin_fit_transform, Modality, NormStats, PatchMode, TokenProjection, TokenSequence, TokenizerConfig,
};
use crate::vision::{PatchGrid, PlotProjection, VisionEncoder, VisionEncoderSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: TaskConfig,
    pub seq_len: usize,
    pub channels: usize,
    #[serde(default)]
    pub render: RenderConfig,
    pub tokenizer: TokenizerConfig,
    /// `None` runs the time-series branch alone.
    #[serde(default)]
    pub vision: Option<VisionEncoderSpec>,
    #[serde(default)]
    pub align: AlignConfig,
    #[serde(default)]
    pub fusion: FusionPlan,
    #[serde(default)]
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub policy: TuningPolicy,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// The patch mode each task requires.
    pub fn patch_mode_for(task: Task) -> PatchMode {
        match task {
            Task::Forecasting => PatchMode::ChannelIndependent,
            _ => PatchMode::Mixed,
        }
    }

    /// Cross-section checks, run before anything is built.
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.seq_len < 2 || self.channels == 0 {
            return Err(Error::config("seq_len", "need seq_len >= 2 and channels >= 1"));
        }
        let tk = &self.tokenizer;
        tk.patch_len(self.seq_len)?;
        if tk.d != self.backbone.width {
            return Err(Error::config(
                "tokenizer.d",
                format!("token width {} differs from backbone width {}", tk.d, self.backbone.width),
            ));
        }
        let want = Self::patch_mode_for(self.task.task);
        if tk.patch_mode != want {
            return Err(Error::config(
                "tokenizer.patch_mode",
                format!("{} needs {want:?} patches", self.task.task.as_str()),
            ));
        }
        let mut n_tokens = tk.r;
        if let Some(v) = &self.vision {
            self.render.validate()?;
            let (q, r) = v.grid(self.render.height, self.render.width)?;
            if v.heads == 0 || v.width % v.heads != 0 {
                return Err(Error::config("vision.heads", "encoder width must divide into heads"));
            }
            let bands = self.channels.min(self.render.c_max);
            if self.render.layout == Layout::Horizontal && self.render.height / bands < 4 {
                return Err(Error::config(
                    "render.height",
                    format!("{bands} plotted channels leave fewer than 4 px per band"),
                ));
            }
            if tk.patch_mode == PatchMode::ChannelIndependent && !self.fusion.broadcast {
                return Err(Error::config(
                    "fusion.broadcast",
                    "channel-independent tokens need visual rows broadcast across channels",
                ));
            }
            if self.fusion.stage == FusionStage::Late {
                n_tokens += q * r;
            }
        }
        if n_tokens > self.backbone.max_positions {
            return Err(Error::config(
                "backbone.max_positions",
                format!("{n_tokens} tokens exceed max_positions {}", self.backbone.max_positions),
            ));
        }
        Ok(())
    }
}

/// Visual input for a batch: rendered images, or encoder outputs cached from
/// a frozen encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum Visual {
    /// `[B, 3, H, W]`
    Images(Tensor),
    /// `[B, q·r, d_v]`
    Features(Tensor),
}

impl Visual {
    pub fn select(&self, rows: &[usize]) -> Visual {
        match self {
            Self::Images(t) => Self::Images(t.select_rows(rows)),
            Self::Features(t) => Self::Features(t.select_rows(rows)),
        }
    }
}

#[derive(Clone, Debug)]
struct VisionBranch {
    encoder: VisionEncoder,
    proj: PlotProjection,
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// Logits `[B, K]`, reconstruction `[B, L, C]` or forecast `[B, F, C]`.
    pub output: Var,
    pub stats: NormStats,
    /// Per-layer attention probabilities.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    tok_proj: TokenProjection,
    vision: Option<VisionBranch>,
    pub backbone: Backbone,
    head: Head,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Model {
    /// Build and initialize a model. Every component draws from its own RNG
    /// stream, so toggling the vision branch leaves the other weights as-is.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let (l, c) = (cfg.seq_len, cfg.channels);
        let tk = &cfg.tokenizer;
        let tok_proj = TokenProjection::new(&mut store, &mut stream(cfg.seed, 1), tk.token_width(l, c)?, tk.d);
        let vision = match &cfg.vision {
            Some(spec) => {
                let encoder = VisionEncoder::new(
                    &mut store,
                    &mut stream(cfg.seed, 2),
                    spec,
                    cfg.render.height,
                    cfg.render.width,
                )?;
                let proj = PlotProjection::new(&mut store, &mut stream(cfg.seed, 3), spec.width, tk.d);
                Some(VisionBranch { encoder, proj })
            }
            None => None,
        };
        let backbone = Backbone::new(&mut store, &mut stream(cfg.seed, 4), &cfg.backbone)?;
        let rng = &mut stream(cfg.seed, 5);
        let head = match cfg.task.task {
            Task::Classification => {
                Head::Classify(ClassifyHead::new(&mut store, rng, tk.d, cfg.task.n_classes, cfg.task.pooling))
            }
            Task::AnomalyDetection => Head::Anomaly(AnomalyHead::new(&mut store, rng, tk.d, tk.patch_len(l)?, c)),
            Task::Forecasting => Head::Forecast(ForecastHead::new(&mut store, rng, tk.d, tk.r, cfg.task.horizon)),
        };
        let mut model = Self { cfg, store, tok_proj, vision, backbone, head };
        model.apply_policy(model.cfg.policy);
        Ok(model)
    }

    pub fn apply_policy(&mut self, policy: TuningPolicy) {
        self.cfg.policy = policy;
        let unfrozen = self.cfg.vision.as_ref().is_some_and(|v| !v.frozen);
        apply_tuning_policy(&mut self.store, policy, unfrozen);
    }

    pub fn has_vision(&self) -> bool {
        self.vision.is_some()
    }

    pub fn vision_trainable(&self) -> bool {
        self.store.iter().any(|(_, p)| p.group == ParamGroup::VisionEncoder && p.trainable)
    }

    /// Patch grid geometry of the vision branch.
    pub fn grid_shape(&self) -> Option<(usize, usize)> {
        self.vision.as_ref().map(|v| v.encoder.grid_shape())
    }

    /// Zero the plot projection (weight and bias).
    pub fn zero_plot_projection(&mut self) {
        if let Some(v) = &self.vision {
            for id in [v.proj.linear.weight, v.proj.linear.bias] {
                let p = self.store.get_mut(id);
                p.value = Tensor::zeros(p.value.shape());
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.cfg.seq_len || s[2] != self.cfg.channels {
            return Err(Error::contract(format!(
                "model expects [B, {}, {}], got {s:?}",
                self.cfg.seq_len, self.cfg.channels
            )));
        }
        Ok(())
    }

    /// Render `[B, L, C]` windows into `[B, 3, H, W]`.
    pub fn render(&self, x: &Tensor) -> Result<Tensor> {
        rasterize_batch(x, &self.cfg.render)
    }

    /// Run the encoder alone on `[B, 3, H, W]` images.
    pub fn encode_features(&self, images: &Tensor) -> Result<Tensor> {
        let v = self.vision.as_ref().ok_or_else(|| Error::contract("model has no vision branch"))?;
        let mut tape = Tape::new();
        let g = v.encoder.forward(&mut tape, &self.store, images)?;
        Ok(tape.value(g.tokens).clone())
    }

    /// Visual input for a whole set of windows, rendered once. With a frozen
    /// encoder the encoder outputs are computed here and reused afterwards.
    pub fn prepare_visual(&self, x: &Tensor, chunk: usize) -> Result<Option<Visual>> {
        if self.vision.is_none() {
            return Ok(None);
        }
        self.check_input(x)?;
        let images = self.render(x)?;
        if self.vision_trainable() {
            return Ok(Some(Visual::Images(images)));
        }
        let b = images.dim(0);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < b {
            let n = chunk.max(1).min(b - start);
            parts.push(self.encode_features(&images.slice_axis(0, start, n))?);
            start += n;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Some(Visual::Features(Tensor::concat(&refs, 0)?)))
    }

    /// Forward pass for `x: [B, L, C]`. Without `visual`, the windows are
    /// rendered on the fly.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, visual: Option<&Visual>) -> Result<ForwardOut> {
        self.check_input(x)?;
        let store = &self.store;
        let (xn, stats) = revin_fit_transform(x)?;
        let patches = tape.constant(patchify(&xn, &self.cfg.tokenizer)?);
        let t = self.tok_proj.forward(tape, store, patches)?;
        let v_seq = match &self.vision {
            Some(v) => {
                let grid = match visual {
                    Some(Visual::Features(f)) => {
                        let (q, r) = v.encoder.grid_shape();
                        PatchGrid { tokens: tape.constant(f.clone()), q, r }
                    }
                    Some(Visual::Images(img)) => v.encoder.forward(tape, store, img)?,
                    None => v.encoder.forward(tape, store, &self.render(x)?)?,
                };
                Some(v.proj.forward(tape, store, grid)?)
            }
            None => None,
        };
        let (f, attention) = match (v_seq, self.cfg.fusion.stage) {
            (None, _) => self.backbone.forward(tape, store, t.tokens)?,
            (Some((v, q, r)), FusionStage::Early) => {
                let aligned = temporal_align(tape, v.tokens, q, r, self.cfg.tokenizer.r, &self.cfg.align)?;
                let aligned = TokenSequence::new(tape, aligned, Modality::Visual)?;
                let z = fuse_early(tape, aligned, t)?;
                self.backbone.forward(tape, store, z.tokens)?
            }
            (Some((v, _, _)), FusionStage::Late) => {
                let fused = fuse_late(tape, store, t, Some(v), &self.backbone)?;
                (fused.tokens.tokens, fused.attention)
            }
        };
        let output = match &self.head {
            Head::Classify(h) => h.forward(tape, store, f)?,
            Head::Anomaly(h) => h.forward(tape, store, f, &stats, self.cfg.seq_len)?,
            Head::Forecast(h) => h.forward(tape, store, f, &stats)?,
        };
        Ok(ForwardOut { output, stats, attention })
    }

    /// Task loss of a forward pass.
    pub fn loss(&self, tape: &mut Tape, out: &ForwardOut, x: &Tensor, labels: &BatchLabels) -> Result<Var> {
        match (self.cfg.task.task, labels) {
            (Task::Classification, BatchLabels::Classes(k)) => loss_cls(tape, out.output, k),
            (Task::AnomalyDetection, _) => {
                let target = tape.constant(x.clone());
                loss_recon(tape, out.output, target)
            }
            (Task::Forecasting, BatchLabels::Future(y)) => {
                let target = tape.constant(y.clone());
                loss_recon(tape, out.output, target)
            }
            (task, _) => Err(Error::Data(format!("batch labels do not fit a {} model", task.as_str()))),
        }
    }

    /// Evaluation-mode output for `x`, processed in chunks of `chunk` rows.
    pub fn predict(&self, x: &Tensor, visual: Option<&Visual>, chunk: usize) -> Result<Tensor> {
        let b = x.dim(0);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < b {
            let n = chunk.max(1).min(b - start);
            let rows: Vec<usize> = (start..start + n).collect();
            let xs = x.slice_axis(0, start, n);
            let vs = visual.map(|v| v.select(&rows));
            let mut tape = Tape::new();
            let out = self.forward(&mut tape, &xs, vs.as_ref())?;
            parts.push(tape.value(out.output).clone());
            start += n;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat(&refs, 0)
    }
}
