//! The sequence backbone, its tuning policies and attention diagnostics.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{average_attention, normal_init, Block, BlockGroups, LayerNorm, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vision::WeightsSource;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    Transformer,
    /// One attention block without a feed-forward half.
    SingleAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub weights_source: WeightsSource,
    pub causal: bool,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Transformer,
            width: 128,
            depth: 4,
            heads: 4,
            max_positions: 1024,
            weights_source: WeightsSource::RandomInit,
            causal: false,
        }
    }
}

impl BackboneSpec {
    pub fn effective_depth(&self) -> usize {
        match self.kind {
            BackboneKind::Transformer => self.depth,
            BackboneKind::SingleAttention => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningPolicy {
    /// LayerNorm and positional embeddings train; attention and FFN stay frozen.
    #[default]
    Default,
    /// Only heads and projections train.
    Freeze,
    /// Default plus the vision encoder.
    TuneVis,
    /// Everything except the (unused) token embedding.
    TuneAll,
}

impl TuningPolicy {
    pub const ALL: [TuningPolicy; 4] = [Self::Default, Self::Freeze, Self::TuneVis, Self::TuneAll];

    pub fn trains(self, group: ParamGroup) -> bool {
        use ParamGroup as G;
        match group {
            G::Head | G::Projection => true,
            G::TokenEmbedding => false,
            G::LayerNorm | G::PositionalEmbedding => self != Self::Freeze,
            G::Attention | G::Ffn => self == Self::TuneAll,
            G::VisionEncoder => matches!(self, Self::TuneVis | Self::TuneAll),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Default => "default",
            Self::Freeze => "freeze",
            Self::TuneVis => "tune_vis",
            Self::TuneAll => "tune_all",
        }
    }
}

/// Set trainable flags from `policy`. An encoder declared unfrozen trains
/// regardless of the policy.
pub fn apply_tuning_policy(store: &mut ParamStore, policy: TuningPolicy, vision_unfrozen: bool) {
    store.set_trainable_by(|g| policy.trains(g) || (vision_unfrozen && g == ParamGroup::VisionEncoder));
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, spec: &BackboneSpec) -> Result<Self> {
        if spec.width == 0 || spec.max_positions == 0 {
            return Err(Error::config("backbone.width", "width and max_positions must be positive"));
        }
        if spec.heads == 0 || spec.width % spec.heads != 0 {
            return Err(Error::config(
                "backbone.heads",
                format!("width {} is not divisible by {} heads", spec.width, spec.heads),
            ));
        }
        let d = spec.width;
        let pos = store.add(
            "backbone.pos",
            ParamGroup::PositionalEmbedding,
            normal_init(rng, &[spec.max_positions, d], 0.02),
            false,
        );
        let with_ffn = spec.kind == BackboneKind::Transformer;
        let blocks = (0..spec.effective_depth())
            .map(|i| {
                Block::new(store, rng, &format!("backbone.blocks.{i}"), BlockGroups::BACKBONE, d, spec.heads, with_ffn)
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(store, "backbone.norm", ParamGroup::LayerNorm, d);
        Ok(Self { spec: spec.clone(), pos, blocks, final_norm })
    }

    /// Last hidden states for `z: [B, N, d]`, plus each layer's attention
    /// probabilities `[B·heads, N, N]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<(Var, Vec<Var>)> {
        let s = tape.shape(z).to_vec();
        if s.len() != 3 || s[2] != self.spec.width {
            return Err(Error::contract(format!("backbone expects [B, N, {}], got {s:?}", self.spec.width)));
        }
        if s[1] > self.spec.max_positions {
            return Err(Error::contract(format!("{} tokens exceed max_positions {}", s[1], self.spec.max_positions)));
        }
        let pos = tape.param(store, self.pos);
        let pos = tape.slice(pos, 0, 0, s[1])?;
        let mut x = tape.add_broadcast(z, pos)?;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, probs) = blk.forward(tape, store, x, self.spec.causal)?;
            x = y;
            maps.push(probs);
        }
        let x = self.final_norm.forward(tape, store, x)?;
        Ok((x, maps))
    }
}

/// Head-and-batch averaged maps `[layers, N, N]` from a forward's attention
/// probabilities.
pub fn attention_maps(tape: &Tape, probs: &[Var]) -> Result<Tensor> {
    let maps: Vec<Tensor> = probs.iter().map(|&p| average_attention(tape.value(p))).collect();
    Tensor::stack(&maps)
}

/// Running mean of attention maps over batches, weighted by batch size.
#[derive(Clone, Debug, Default)]
pub struct AttentionAccumulator {
    sum: Option<Tensor>,
    weight: f64,
}

impl AttentionAccumulator {
    pub fn add(&mut self, maps: &Tensor, batch: usize) -> Result<()> {
        let scaled = maps.map(|v| v * batch as f64);
        match &mut self.sum {
            Some(s) if s.shape() == maps.shape() => s.add_assign(&scaled),
            Some(s) => {
                return Err(Error::contract(format!(
                    "attention maps {:?} vs accumulated {:?}",
                    maps.shape(),
                    s.shape()
                )))
            }
            None => self.sum = Some(scaled),
        }
        self.weight += batch as f64;
        Ok(())
    }

    pub fn mean(&self) -> Option<Tensor> {
        self.sum.as_ref().map(|s| s.map(|v| v / self.weight))
    }
}
