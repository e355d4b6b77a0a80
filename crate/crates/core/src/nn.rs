//! Parameters, parameter groups and the layers shared by the vision encoder and
//! the sequence backbone.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Functional tag every parameter carries. Tuning policies act on groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Attention,
    Ffn,
    LayerNorm,
    PositionalEmbedding,
    TokenEmbedding,
    Head,
    Projection,
    VisionEncoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Attention,
        ParamGroup::Ffn,
        ParamGroup::LayerNorm,
        ParamGroup::PositionalEmbedding,
        ParamGroup::TokenEmbedding,
        ParamGroup::Head,
        ParamGroup::Projection,
        ParamGroup::VisionEncoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Attention => "attention",
            ParamGroup::Ffn => "ffn",
            ParamGroup::LayerNorm => "layer_norm",
            ParamGroup::PositionalEmbedding => "positional_embedding",
            ParamGroup::TokenEmbedding => "token_embedding",
            ParamGroup::Head => "head",
            ParamGroup::Projection => "projection",
            ParamGroup::VisionEncoder => "vision_encoder",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (false for biases and norms).
    pub decay: bool,
}

/// Owner of every parameter of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor, decay: bool) -> ParamId {
        self.params.push(Param { name: name.into(), group, value, trainable: true, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Parameter ids keyed by group. Every group appears, possibly empty.
    pub fn groups(&self) -> BTreeMap<ParamGroup, Vec<ParamId>> {
        let mut out: BTreeMap<ParamGroup, Vec<ParamId>> = ParamGroup::ALL.iter().map(|&g| (g, Vec::new())).collect();
        for (id, p) in self.iter() {
            out.get_mut(&p.group).expect("all groups present").push(id);
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_trainable_by(&mut self, f: impl Fn(ParamGroup) -> bool) {
        for p in &mut self.params {
            p.trainable = f(p.group);
        }
    }

    /// Snapshot of all values, e.g. for restoring the best epoch.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) {
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v.clone();
        }
    }

    /// Overwrite values by name. Every provided key must exist and agree in
    /// shape; parameters absent from `values` keep their current value.
    pub fn load_named(&mut self, values: &BTreeMap<String, Tensor>) -> Result<usize> {
        let mut loaded = 0;
        for (name, t) in values {
            let id = self.find(name).ok_or_else(|| Error::config("weights", format!("unknown parameter `{name}`")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape() {
                return Err(Error::config(
                    "weights",
                    format!("parameter `{name}` has shape {:?}, archive has {:?}", p.value.shape(), t.shape()),
                ));
            }
            p.value = t.clone();
            loaded += 1;
        }
        Ok(loaded)
    }

    /// All values keyed by name.
    pub fn named_values(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}

/// `U(-1/√fan_in, 1/√fan_in)`, the usual default for linear layers.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / math::sqrt(fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, uniform_init(rng, &[in_dim, out_dim], in_dim), true);
        let bias = store.add(format!("{name}.bias"), group, uniform_init(rng, &[out_dim], in_dim), false);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let last = tape.shape(x).last().copied().unwrap_or(0);
        if last != self.in_dim {
            return Err(Error::contract(format!("linear expects width {}, got {:?}", self.in_dim, tape.shape(x))));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_broadcast(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), group, Tensor::full(&[dim], 1.0), false);
        let beta = store.add(format!("{name}.bias"), group, Tensor::zeros(&[dim]), false);
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Which tag each kind of block parameter receives.
#[derive(Clone, Copy, Debug)]
pub struct BlockGroups {
    pub attention: ParamGroup,
    pub ffn: ParamGroup,
    pub norm: ParamGroup,
}

impl BlockGroups {
    pub const BACKBONE: BlockGroups =
        BlockGroups { attention: ParamGroup::Attention, ffn: ParamGroup::Ffn, norm: ParamGroup::LayerNorm };

    pub const VISION: BlockGroups = BlockGroups {
        attention: ParamGroup::VisionEncoder,
        ffn: ParamGroup::VisionEncoder,
        norm: ParamGroup::VisionEncoder,
    };
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config("heads", format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), group, dim, 3 * dim),
            out: Linear::new(store, rng, &format!("{name}.out"), group, dim, dim),
            heads,
            dim,
        })
    }

    /// `x: [B, N, d]`. Returns the output and the attention probabilities
    /// `[B·heads, N, N]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, causal: bool) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let dh = d / h;
        let qkv = self.qkv.forward(tape, store, x)?;
        let qkv = tape.reshape(qkv, &[b, n, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = tape.reshape(qkv, &[3, b * h, n, dh])?;
        let mut parts = [qkv; 3];
        for (i, p) in parts.iter_mut().enumerate() {
            let s = tape.slice(qkv, 0, i, 1)?;
            *p = tape.reshape(s, &[b * h, n, dh])?;
        }
        let [q, k, v] = parts;
        let scores = tape.bmm(q, k, true)?;
        let mut scores = tape.scale(scores, 1.0 / math::sqrt(dh as f64));
        if causal {
            let mask = Tensor::from_fn(&[n, n], |i| if i % n > i / n { -1e30 } else { 0.0 });
            let m = tape.constant(mask);
            scores = tape.add_broadcast(scores, m)?;
        }
        let probs = tape.softmax(scores);
        let ctx = tape.bmm(probs, v, false)?;
        let ctx = tape.reshape(ctx, &[b, h, n, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, n, d])?;
        let out = self.out.forward(tape, store, ctx)?;
        Ok((out, probs))
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), group, dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), group, hidden, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Pre-norm transformer block; the feed-forward half is optional.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: Option<LayerNorm>,
    pub ffn: Option<FeedForward>,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        groups: BlockGroups,
        dim: usize,
        heads: usize,
        with_ffn: bool,
    ) -> Result<Self> {
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), groups.norm, dim);
        let attn = SelfAttention::new(store, rng, &format!("{name}.attn"), groups.attention, dim, heads)?;
        let (ln2, ffn) = if with_ffn {
            (
                Some(LayerNorm::new(store, &format!("{name}.ln2"), groups.norm, dim)),
                Some(FeedForward::new(store, rng, &format!("{name}.ffn"), groups.ffn, dim, 4 * dim)),
            )
        } else {
            (None, None)
        };
        Ok(Self { ln1, attn, ln2, ffn })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, causal: bool) -> Result<(Var, Var)> {
        let h = self.ln1.forward(tape, store, x)?;
        let (a, probs) = self.attn.forward(tape, store, h, causal)?;
        let mut x = tape.add(x, a)?;
        if let (Some(ln2), Some(ffn)) = (&self.ln2, &self.ffn) {
            let h = ln2.forward(tape, store, x)?;
            let f = ffn.forward(tape, store, h)?;
            x = tape.add(x, f)?;
        }
        Ok((x, probs))
    }
}

/// Averages `[B·heads, N, N]` attention probabilities down to `[N, N]`.
pub fn average_attention(probs: &Tensor) -> Tensor {
    let s = probs.shape();
    let (m, n) = (s[0], s[1]);
    let mut out = vec![0.0; n * n];
    for blk in probs.data().chunks(n * n) {
        for (o, v) in out.iter_mut().zip(blk) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= m as f64;
    }
    Tensor::new(&[n, n], out).expect("square")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn groups_partition_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        Block::new(&mut store, &mut rng, "b", BlockGroups::BACKBONE, 8, 2, true).unwrap();
        let groups = store.groups();
        let total: usize = groups.values().map(Vec::len).sum();
        assert_eq!(total, store.len());
        assert_eq!(groups[&ParamGroup::Attention].len(), 4);
        assert_eq!(groups[&ParamGroup::Ffn].len(), 4);
        assert_eq!(groups[&ParamGroup::LayerNorm].len(), 4);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(SelfAttention::new(&mut store, &mut rng, "a", ParamGroup::Attention, 10, 3).is_err());
    }

    #[test]
    fn causal_attention_is_lower_triangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let attn = SelfAttention::new(&mut store, &mut rng, "a", ParamGroup::Attention, 8, 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(normal_init(&mut rng, &[1, 5, 8], 1.0));
        let (_, probs) = attn.forward(&mut tape, &store, x, true).unwrap();
        let p = tape.value(probs);
        for h in 0..2 {
            for i in 0..5 {
                for j in i + 1..5 {
                    assert!(p.at(&[h, i, j]) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn load_named_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.add("w", ParamGroup::Head, Tensor::zeros(&[2, 2]), true);
        let mut m = BTreeMap::new();
        m.insert(String::from("w"), Tensor::zeros(&[3]));
        assert!(store.load_named(&m).is_err());
        m.insert(String::from("w"), Tensor::full(&[2, 2], 1.0));
        assert_eq!(store.load_named(&m).unwrap(), 1);
        assert_eq!(store.get(ParamId(0)).value.data(), &[1.0; 4]);
    }
}
