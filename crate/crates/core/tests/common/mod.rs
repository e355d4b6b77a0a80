#![allow(dead_code)]

use plotfuse_core::backbone::BackboneKind;
use plotfuse_core::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

/// A small model: L = 16, C = 3, r = 4, d = 8.
pub fn small_config(task: Task, vision: bool, seed: u64) -> ModelConfig {
    ModelConfig {
        task: TaskConfig { task, n_classes: 3, horizon: 4, ..TaskConfig::default() },
        seq_len: 16,
        channels: 3,
        render: RenderConfig { height: 24, width: 16, ..RenderConfig::default() },
        tokenizer: TokenizerConfig { r: 4, patch_mode: ModelConfig::patch_mode_for(task), d: 8 },
        vision: vision.then(|| VisionEncoderSpec {
            kind: EncoderKind::ToyVit,
            pixel_patch: 8,
            width: 8,
            depth: 1,
            heads: 2,
            ..VisionEncoderSpec::default()
        }),
        align: AlignConfig::default(),
        fusion: FusionPlan::default(),
        backbone: BackboneSpec {
            kind: BackboneKind::Transformer,
            width: 8,
            depth: 2,
            heads: 2,
            max_positions: 32,
            ..BackboneSpec::default()
        },
        policy: TuningPolicy::Default,
        seed,
    }
}
