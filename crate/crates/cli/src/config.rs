use std::path::Path;

use anyhow::{Context, Result};
use gistkv::layout::CompressionConfig;
use gistkv::model::{ModelConfig, TrainConfig};
use serde::Deserialize;

/// Flat JSON run configuration. Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub ratio: Option<usize>,
    pub sink_count: Option<usize>,
    pub window_units: Option<usize>,
    pub block_size: Option<usize>,

    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub hidden_mult: Option<usize>,
    pub vocab: Option<usize>,
    pub rope_theta: Option<f64>,

    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub min_lr_ratio: Option<f64>,
    pub weight_decay: Option<f64>,
    pub grad_clip: Option<f64>,
}

/// Layout defaults for toy-scale commands.
pub const TOY_LAYOUT: CompressionConfig = CompressionConfig {
    ratio: 4,
    sink_count: 4,
    window_units: 2,
    block_size: 16,
};

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn compression(&self, base: CompressionConfig) -> CompressionConfig {
        CompressionConfig {
            ratio: self.ratio.unwrap_or(base.ratio),
            sink_count: self.sink_count.unwrap_or(base.sink_count),
            window_units: self.window_units.unwrap_or(base.window_units),
            block_size: self.block_size.unwrap_or(base.block_size),
        }
    }

    pub fn model(&self, seed: u64) -> ModelConfig {
        let d = ModelConfig::default();
        ModelConfig {
            layers: self.layers.unwrap_or(d.layers),
            heads: self.heads.unwrap_or(d.heads),
            head_dim: self.head_dim.unwrap_or(d.head_dim),
            hidden_mult: self.hidden_mult.unwrap_or(d.hidden_mult),
            vocab: self.vocab.unwrap_or(d.vocab),
            rope_theta: self.rope_theta.unwrap_or(d.rope_theta),
            seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            steps: self.steps.unwrap_or(d.steps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            warmup_steps: self.warmup_steps.unwrap_or(d.warmup_steps),
            min_lr_ratio: self.min_lr_ratio.unwrap_or(d.min_lr_ratio),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            grad_clip: self.grad_clip.unwrap_or(d.grad_clip),
            ..d
        }
    }
}
