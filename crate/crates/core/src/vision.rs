//! Builtin plot encoders and the projection into the backbone width.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_init, Block, BlockGroups, LayerNorm, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::tokenizer::{Modality, TokenSequence};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    ToyVit,
    ToyConv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSource {
    #[default]
    RandomInit,
    ExternalArchive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionEncoderSpec {
    pub kind: EncoderKind,
    pub pixel_patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub weights_source: WeightsSource,
    pub frozen: bool,
}

impl Default for VisionEncoderSpec {
    fn default() -> Self {
        Self {
            kind: EncoderKind::ToyVit,
            pixel_patch: 16,
            width: 128,
            depth: 4,
            heads: 4,
            weights_source: WeightsSource::RandomInit,
            frozen: true,
        }
    }
}

impl VisionEncoderSpec {
    /// Grid geometry `(q, r)` for an `H × W` image.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.pixel_patch;
        if p == 0 || height % p != 0 || width % p != 0 {
            return Err(Error::config(
                "vision.pixel_patch",
                format!("image {height}x{width} is not divisible by patch size {p}"),
            ));
        }
        Ok((height / p, width / p))
    }
}

/// Encoder output: `[B, q·r, d_v]` tokens, row-major over the patch grid.
#[derive(Clone, Copy, Debug)]
pub struct PatchGrid {
    pub tokens: Var,
    pub q: usize,
    pub r: usize,
}

/// Grid cell of token `n`.
pub fn grid_cell(n: usize, r: usize) -> (usize, usize) {
    (n / r, n % r)
}

/// Token index of grid cell `(row, col)`.
pub fn grid_index(row: usize, col: usize, r: usize) -> usize {
    row * r + col
}

/// Non-overlapping `p × p` tiles of `[B, 3, H, W]` as `[B, (H/p)·(W/p), 3·p·p]`;
/// features within a tile are ordered (color, row, column).
pub fn image_patches(images: &Tensor, p: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || p == 0 || s[2] % p != 0 || s[3] % p != 0 {
        return Err(Error::contract(format!("cannot tile images {s:?} into {p}x{p} patches")));
    }
    let (b, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let (q, r) = (h / p, w / p);
    let f = ch * p * p;
    let src = images.data();
    Ok(Tensor::from_fn(&[b, q * r, f], |i| {
        let (bi, rest) = (i / (q * r * f), i % (q * r * f));
        let (n, k) = (rest / f, rest % f);
        let (gy, gx) = (n / r, n % r);
        let (c, py, px) = (k / (p * p), (k / p) % p, k % p);
        src[((bi * ch + c) * h + gy * p + py) * w + gx * p + px]
    }))
}

#[derive(Clone, Debug)]
struct VitParts {
    embed: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct ConvParts {
    stem: Linear,
    stem_patch: usize,
    stages: Vec<Linear>,
}

#[derive(Clone, Debug)]
enum Body {
    Vit(VitParts),
    Conv(ConvParts),
}

/// A builtin vision encoder; all parameters are tagged `vision_encoder`.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub spec: VisionEncoderSpec,
    q: usize,
    r: usize,
    body: Body,
    norm: LayerNorm,
}

impl VisionEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        spec: &VisionEncoderSpec,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let (q, r) = spec.grid(height, width)?;
        let g = ParamGroup::VisionEncoder;
        let dv = spec.width;
        if dv == 0 {
            return Err(Error::config("vision.width", "must be positive"));
        }
        let body = match spec.kind {
            EncoderKind::ToyVit => {
                let p = spec.pixel_patch;
                let embed = Linear::new(store, rng, "vision.embed", g, 3 * p * p, dv);
                let cls = store.add("vision.cls", g, normal_init(rng, &[1, 1, dv], 0.02), false);
                let pos = store.add("vision.pos", g, normal_init(rng, &[q * r + 1, dv], 0.02), false);
                let blocks = (0..spec.depth)
                    .map(|i| {
                        Block::new(store, rng, &format!("vision.blocks.{i}"), BlockGroups::VISION, dv, spec.heads, true)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Body::Vit(VitParts { embed, cls, pos, blocks })
            }
            EncoderKind::ToyConv => {
                let p = spec.pixel_patch;
                let k = p.trailing_zeros().min(2) as usize;
                let stem_patch = p >> k;
                let stem = Linear::new(store, rng, "vision.stem", g, 3 * stem_patch * stem_patch, dv);
                let stages =
                    (0..k).map(|i| Linear::new(store, rng, &format!("vision.stages.{i}"), g, 4 * dv, dv)).collect();
                Body::Conv(ConvParts { stem, stem_patch, stages })
            }
        };
        let norm = LayerNorm::new(store, "vision.norm", g, dv);
        Ok(Self { spec: spec.clone(), q, r, body, norm })
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.q, self.r)
    }

    /// Encode `[B, 3, H, W]` images.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, images: &Tensor) -> Result<PatchGrid> {
        let s = images.shape();
        let p = self.spec.pixel_patch;
        if s.len() != 4 || s[1] != 3 || s[2] != self.q * p || s[3] != self.r * p {
            return Err(Error::contract(format!(
                "encoder built for [B, 3, {}, {}], got {s:?}",
                self.q * p,
                self.r * p
            )));
        }
        let b = s[0];
        let n = self.q * self.r;
        let dv = self.spec.width;
        let x = match &self.body {
            Body::Vit(v) => {
                let patches = tape.constant(image_patches(images, p)?);
                let x = v.embed.forward(tape, store, patches)?;
                let cls = tape.param(store, v.cls);
                let cls = tape.gather_rows(cls, &vec![0; b])?;
                let x = tape.concat(&[cls, x], 1)?;
                let pos = tape.param(store, v.pos);
                let mut x = tape.add_broadcast(x, pos)?;
                for blk in &v.blocks {
                    x = blk.forward(tape, store, x, false)?.0;
                }
                let x = self.norm.forward(tape, store, x)?;
                tape.slice(x, 1, 1, n)?
            }
            Body::Conv(c) => {
                let sp = c.stem_patch;
                let patches = tape.constant(image_patches(images, sp)?);
                let mut x = c.stem.forward(tape, store, patches)?;
                let (mut h, mut w) = (self.q * p / sp, self.r * p / sp);
                for stage in &c.stages {
                    x = tape.relu(x);
                    // 2×2 space-to-depth, then a shared linear map
                    let t = tape.reshape(x, &[b, h / 2, 2, w / 2, 2, dv])?;
                    let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
                    h /= 2;
                    w /= 2;
                    let t = tape.reshape(t, &[b, h * w, 4 * dv])?;
                    x = stage.forward(tape, store, t)?;
                }
                self.norm.forward(tape, store, x)?
            }
        };
        Ok(PatchGrid { tokens: x, q: self.q, r: self.r })
    }
}

/// The linear map from encoder width to backbone width.
#[derive(Clone, Debug)]
pub struct PlotProjection {
    pub linear: Linear,
}

impl PlotProjection {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dv: usize, d: usize) -> Self {
        Self { linear: Linear::new(store, rng, "vision.proj", ParamGroup::Projection, dv, d) }
    }

    /// Project grid tokens; the geometry `(q, r)` is carried through.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        grid: PatchGrid,
    ) -> Result<(TokenSequence, usize, usize)> {
        let t = self.linear.forward(tape, store, grid.tokens)?;
        Ok((TokenSequence::new(tape, t, Modality::Visual)?, grid.q, grid.r))
    }
}
