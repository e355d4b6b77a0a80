#![allow(dead_code)]

use std::path::{Path, PathBuf};

use plotfuse::config::{load, ExperimentConfig, Overrides};

pub const TINY_CLS: &str = r#"name = "tiny_cls"

[task]
task = "classification"
n_classes = 2

[data.synthetic]
kind = "class_motifs"
n_instances = 12
n_classes = 2
length = 16
channels = 3
base_freqs = [1.0, 3.0]
snr_db = 20.0
seed = 3

[model]
render = { height = 16, width = 32 }

[model.tokenizer]
r = 8

[model.vision]
kind = "toy_vit"
pixel_patch = 8
width = 8
depth = 1
heads = 2

[model.backbone]
width = 8
depth = 1
heads = 2
max_positions = 32

[train]
max_epochs = 2
batch_size = 8
lr_max = 3e-3
seeds = [0, 1]
policy = "tune_all"
"#;

pub const TINY_FC: &str = r#"name = "tiny_fc"

[task]
task = "forecasting"
horizon = 8

[data]
name = "wave_a"

[data.synthetic]
kind = "seasonal_trend"
length = 240
channels = 2
periods = [8.0, 32.0]
amplitudes = [1.0, 0.5]
trend_slope = 0.001
snr_db = 20.0
seed = 11

[target]
name = "wave_b"

[target.synthetic]
kind = "seasonal_trend"
length = 240
channels = 2
periods = [8.0, 32.0]
amplitudes = [1.0, 0.5]
trend_slope = 0.001
snr_db = 20.0
seed = 12

[model]
seq_len = 32
render = { height = 16, width = 32 }

[model.tokenizer]
r = 8

[model.vision]
kind = "toy_conv"
pixel_patch = 8
width = 8
depth = 1
heads = 2

[model.backbone]
width = 8
depth = 1
heads = 2
max_positions = 32

[eval]
forecast_stride = 8
ar_horizons = [8, 16]

[train]
max_epochs = 1
batch_size = 8
seeds = [0]
"#;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_plotfuse")
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Load `text` with `out_dir` pointing into `dir`.
pub fn config(dir: &Path, text: &str, pairs: &[&str]) -> ExperimentConfig {
    let p = write_config(dir, "cfg.toml", text);
    let ov = Overrides {
        pairs: pairs.iter().map(|s| s.to_string()).collect(),
        out: Some(dir.join("out")),
        ..Overrides::default()
    };
    load(&p, &ov).unwrap().0
}
