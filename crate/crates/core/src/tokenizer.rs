//! Reverse instance normalization and non-overlapping patch tokens.

use alloc::format;
use alloc::vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{Linear, ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const REVIN_EPS: f64 = 1e-5;

/// Per-instance, per-channel statistics, each `[B, 1, C]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub eps: f64,
}

impl NormStats {
    pub fn batch(&self) -> usize {
        self.mu.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.mu.dim(2)
    }
}

fn check_bc(y: &[usize], stats: &NormStats) -> Result<()> {
    if y.len() != 3 || y[0] != stats.batch() || y[2] != stats.channels() {
        return Err(Error::contract(format!(
            "revin_invert: output {y:?} does not match statistics [{}, 1, {}]",
            stats.batch(),
            stats.channels()
        )));
    }
    Ok(())
}

/// Normalize `[B, L, C]` per instance and channel over time.
pub fn revin_fit_transform(x: &Tensor) -> Result<(Tensor, NormStats)> {
    if x.rank() != 3 || x.dim(1) < 2 {
        return Err(Error::contract(format!("revin expects [B, L >= 2, C], got {:?}", x.shape())));
    }
    let (b, l, c) = (x.dim(0), x.dim(1), x.dim(2));
    let mut mu = vec![0.0; b * c];
    let mut sigma = vec![0.0; b * c];
    let mut col = vec![0.0; l];
    let xd = x.data();
    for bi in 0..b {
        for ci in 0..c {
            for t in 0..l {
                col[t] = xd[(bi * l + t) * c + ci];
            }
            let (m, v) = math::mean_var(&col);
            mu[bi * c + ci] = m;
            sigma[bi * c + ci] = math::sqrt(v + REVIN_EPS);
        }
    }
    let out = Tensor::from_fn(x.shape(), |i| {
        let k = (i / (l * c)) * c + i % c;
        (xd[i] - mu[k]) / sigma[k]
    });
    Ok((out, NormStats { mu: Tensor::new(&[b, 1, c], mu)?, sigma: Tensor::new(&[b, 1, c], sigma)?, eps: REVIN_EPS }))
}

/// `y·σ + μ` broadcast over time, for `y: [B, T, C]`.
pub fn revin_invert(y: &Tensor, stats: &NormStats) -> Result<Tensor> {
    check_bc(y.shape(), stats)?;
    let (t, c) = (y.dim(1), y.dim(2));
    let (mu, sigma) = (stats.mu.data(), stats.sigma.data());
    Ok(Tensor::from_fn(y.shape(), |i| {
        let k = (i / (t * c)) * c + i % c;
        y.data()[i] * sigma[k] + mu[k]
    }))
}

/// [`revin_invert`] on the tape.
pub fn revin_invert_var(tape: &mut Tape, y: Var, stats: &NormStats) -> Result<Var> {
    check_bc(tape.shape(y), stats)?;
    let s = tape.constant(stats.sigma.clone());
    let m = tape.constant(stats.mu.clone());
    let ys = tape.mul_broadcast(y, s)?;
    tape.add_broadcast(ys, m)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// One token row per instance; a token holds all channels of its span.
    #[default]
    Mixed,
    /// One token row per (instance, channel), rows ordered `b·C + c`.
    ChannelIndependent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Tokens per sequence.
    pub r: usize,
    pub patch_mode: PatchMode,
    /// Backbone width.
    pub d: usize,
}

impl TokenizerConfig {
    /// Patch length `ceil(L / r)`.
    pub fn patch_len(&self, l: usize) -> Result<usize> {
        if self.r == 0 || self.r > l {
            return Err(Error::config("tokenizer.r", format!("r = {} must lie in [1, L = {l}]", self.r)));
        }
        Ok(math::div_ceil(l, self.r))
    }

    /// Input width of the token projection.
    pub fn token_width(&self, l: usize, c: usize) -> Result<usize> {
        let p = self.patch_len(l)?;
        Ok(match self.patch_mode {
            PatchMode::Mixed => p * c,
            PatchMode::ChannelIndependent => p,
        })
    }
}

/// Cut `[B, L, C]` into `r` patches, padding by repeating the last step.
///
/// Mixed mode gives `[B, r, P·C]` with element `p·C + c` of patch `t` holding
/// step `t·P + p` of channel `c`. Channel-independent mode gives `[B·C, r, P]`.
pub fn patchify(x: &Tensor, cfg: &TokenizerConfig) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::contract(format!("patchify expects [B, L, C], got {:?}", x.shape())));
    }
    let (b, l, c) = (x.dim(0), x.dim(1), x.dim(2));
    let p = cfg.patch_len(l)?;
    let lp = cfg.r * p;
    let xd = x.data();
    let padded = Tensor::from_fn(&[b, lp, c], |i| {
        let (bi, rest) = (i / (lp * c), i % (lp * c));
        let (t, ci) = (rest / c, rest % c);
        xd[(bi * l + t.min(l - 1)) * c + ci]
    });
    match cfg.patch_mode {
        PatchMode::Mixed => padded.reshape(&[b, cfg.r, p * c]),
        PatchMode::ChannelIndependent => padded.permute(&[0, 2, 1]).reshape(&[b * c, cfg.r, p]),
    }
}

/// Inverse of mixed-mode [`patchify`], without cropping: `[B, r, P·C]` to
/// `[B, r·P, C]`.
pub fn unpatchify_mixed(patches: &Tensor, c: usize) -> Result<Tensor> {
    let s = patches.shape();
    if s.len() != 3 || c == 0 || s[2] % c != 0 {
        return Err(Error::contract(format!("cannot un-patch {s:?} into {c} channels")));
    }
    patches.clone().reshape(&[s[0], s[1] * s[2] / c, c])
}

/// Which stream a token sequence carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Ts,
    Visual,
    Fused,
}

/// A `[B', N, d]` batch of tokens on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub modality: Modality,
    pub effective_batch: usize,
}

impl TokenSequence {
    pub fn new(tape: &Tape, tokens: Var, modality: Modality) -> Result<Self> {
        if tape.shape(tokens).len() != 3 {
            return Err(Error::contract(format!("tokens must be [B, N, d], got {:?}", tape.shape(tokens))));
        }
        Ok(Self { tokens, modality, effective_batch: tape.shape(tokens)[0] })
    }

    pub fn len(&self, tape: &Tape) -> usize {
        tape.shape(self.tokens)[1]
    }

    pub fn width(&self, tape: &Tape) -> usize {
        tape.shape(self.tokens)[2]
    }
}

/// The learned patch-to-token affine map.
#[derive(Clone, Debug)]
pub struct TokenProjection {
    pub linear: Linear,
}

impl TokenProjection {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, in_width: usize, d: usize) -> Self {
        Self { linear: Linear::new(store, rng, "tokenizer.proj", ParamGroup::Projection, in_width, d) }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, patches: Var) -> Result<TokenSequence> {
        let t = self.linear.forward(tape, store, patches)?;
        TokenSequence::new(tape, t, Modality::Ts)
    }
}
