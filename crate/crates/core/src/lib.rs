//! Core of the plotfuse toolkit.
//!
//! Multivariate windows are rendered into composite line plots, encoded by a
//! small vision encoder, aligned column-by-column with numerical patch tokens,
//! fused, passed through a selectively fine-tuned transformer backbone and
//! decoded by a task head (classification, reconstruction-based anomaly
//! detection or forecasting).
//!
//! The crate is `no_std` and only needs `alloc`. Everything here is pure
//! computation over in-memory arrays; file formats, weight archives, PNG export
//! and the command line live in the companion `plotfuse` crate.

#![cfg_attr(not(test), no_std)]
#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

extern crate alloc;

pub mod align;
pub mod autograd;
pub mod backbone;
pub mod data;
pub mod error;
pub mod experiment;
pub mod heads;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::Tensor;

pub mod prelude {
    pub use crate::align::{Aggregation, AlignConfig, FusionPlan, FusionStage};
    pub use crate::backbone::{BackboneKind, BackboneSpec, TuningPolicy};
    pub use crate::data::{SeriesInstance, SyntheticKind, SyntheticSpec, WindowBatch};
    pub use crate::heads::{Pooling, Task, TaskConfig};
    pub use crate::model::{Model, ModelConfig};
    pub use crate::raster::{Layout, RenderConfig, RenderedPlot};
    pub use crate::tokenizer::{NormStats, PatchMode, TokenizerConfig};
    pub use crate::train::{TrainConfig, TrainMode};
    pub use crate::vision::{EncoderKind, VisionEncoderSpec};
    pub use crate::{Error, Result, Tensor};
}
