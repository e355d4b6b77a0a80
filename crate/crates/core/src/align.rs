//! Column-wise alignment of visual patch tokens with time-series tokens, and
//! the two fusion stages.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tokenizer::{Modality, TokenSequence};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub agg: Aggregation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStage {
    #[default]
    Early,
    Late,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionPlan {
    pub stage: FusionStage,
    /// Repeat visual rows for every channel row of channel-independent batches.
    pub broadcast: bool,
}

impl Default for FusionPlan {
    fn default() -> Self {
        Self { stage: FusionStage::Early, broadcast: true }
    }
}

/// `[B, q·r, d]` grid tokens to `[B, target_len, d]`: aggregate each column
/// over its `q` rows, then interpolate the `r` columns to `target_len`.
pub fn temporal_align(
    tape: &mut Tape,
    tokens: Var,
    q: usize,
    r: usize,
    target_len: usize,
    cfg: &AlignConfig,
) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 || s[1] != q * r || q == 0 || r == 0 {
        return Err(Error::contract(format!("alignment expects [B, {q}·{r}, d] tokens, got {s:?}")));
    }
    if target_len == 0 {
        return Err(Error::contract("alignment target length must be positive"));
    }
    let grid = tape.reshape(tokens, &[s[0], q, r, s[2]])?;
    let cols = match cfg.agg {
        Aggregation::Mean => tape.order_free_mean_axis(grid, 1)?,
        Aggregation::Max => tape.max_axis(grid, 1)?,
    };
    if r == target_len {
        return Ok(cols);
    }
    tape.interpolate(cols, 1, target_len)
}

/// Visual rows repeated so they line up with `rows` token rows.
fn broadcast_rows(tape: &mut Tape, v: Var, rows: usize) -> Result<Var> {
    let b = tape.shape(v)[0];
    if b == rows {
        return Ok(v);
    }
    if b == 0 || rows % b != 0 {
        return Err(Error::contract(format!("cannot broadcast {b} visual rows to {rows} token rows")));
    }
    let c = rows / b;
    let index: Vec<usize> = (0..rows).map(|i| i / c).collect();
    tape.gather_rows(v, &index)
}

/// `Z = Ṽ + T′`, broadcasting visual rows across channel blocks.
pub fn fuse_early(tape: &mut Tape, v_aligned: TokenSequence, t_tokens: TokenSequence) -> Result<TokenSequence> {
    let rows = tape.shape(t_tokens.tokens)[0];
    let v = broadcast_rows(tape, v_aligned.tokens, rows)?;
    if tape.shape(v) != tape.shape(t_tokens.tokens) {
        return Err(Error::contract(format!(
            "early fusion: visual {:?} vs time-series {:?}",
            tape.shape(v),
            tape.shape(t_tokens.tokens)
        )));
    }
    let z = tape.add(v, t_tokens.tokens)?;
    TokenSequence::new(tape, z, Modality::Fused)
}

/// Output of [`fuse_late`].
#[derive(Clone, Debug)]
pub struct LateFused {
    pub tokens: TokenSequence,
    /// Per-layer attention over the concatenated sequence.
    pub attention: Vec<Var>,
}

/// Run the backbone over `[T′ ‖ V′]`, then add the mean of the visual outputs
/// to every time-series output.
pub fn fuse_late(
    tape: &mut Tape,
    store: &ParamStore,
    t_tokens: TokenSequence,
    v_tokens: Option<TokenSequence>,
    backbone: &Backbone,
) -> Result<LateFused> {
    let Some(v_tokens) = v_tokens.filter(|v| tape.shape(v.tokens)[1] > 0) else {
        let (out, attention) = backbone.forward(tape, store, t_tokens.tokens)?;
        return Ok(LateFused { tokens: TokenSequence::new(tape, out, Modality::Fused)?, attention });
    };
    let ts = tape.shape(t_tokens.tokens).to_vec();
    let (rows, n_ts, d) = (ts[0], ts[1], ts[2]);
    let v = broadcast_rows(tape, v_tokens.tokens, rows)?;
    if tape.shape(v)[2] != d {
        return Err(Error::contract(format!("late fusion: visual width {} vs {d}", tape.shape(v)[2])));
    }
    let n_vis = tape.shape(v)[1];
    let z = tape.concat(&[t_tokens.tokens, v], 1)?;
    let (out, attention) = backbone.forward(tape, store, z)?;
    let t_out = tape.slice(out, 1, 0, n_ts)?;
    let v_out = tape.slice(out, 1, n_ts, n_vis)?;
    let v_mean = tape.mean_axis(v_out, 1)?;
    let v_mean = tape.reshape(v_mean, &[rows, 1, d])?;
    let fused = tape.add_broadcast(t_out, v_mean)?;
    Ok(LateFused { tokens: TokenSequence::new(tape, fused, Modality::Fused)?, attention })
}
