use std::path::Path;

use anyhow::{bail, Context, Result};
use intrus::model::ModelConfig;
use intrus::training::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const PRESETS: [&str; 2] = ["desk", "transformer-base"];

/// Every tunable of a training run under one flat namespace. Keys are the
/// long flag names with `-` replaced by `_`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub mode: TrainMode,
    pub steps: u64,
    pub pretrain_steps: u64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub batch_tokens: usize,
    pub beam_for_argmax: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub target_accuracy: Option<f64>,
    pub max_eval: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl RunConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let (t, m) = match name {
            "desk" => (TrainConfig::desk(), ModelConfig::desk(0)),
            "transformer-base" => (TrainConfig::transformer_base(), ModelConfig::transformer_base(0)),
            _ => return None,
        };
        Some(Self {
            preset: name.to_string(),
            mode: t.mode,
            steps: t.steps,
            pretrain_steps: t.pretrain_steps,
            base_lr: t.base_lr,
            warmup_steps: t.warmup_steps,
            batch_tokens: t.batch_tokens,
            beam_for_argmax: t.beam_for_argmax,
            seed: t.seed,
            clip_norm: t.clip_norm,
            eval_every: t.eval_every,
            checkpoint_every: t.checkpoint_every,
            target_accuracy: t.target_accuracy,
            max_eval: t.max_eval,
            d_model: m.d_model,
            num_heads: m.num_heads,
            num_encoder_layers: m.num_encoder_layers,
            num_decoder_layers: m.num_decoder_layers,
            ffn_dim: m.ffn_dim,
            max_len: m.max_len,
            dropout: m.dropout,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            steps: self.steps,
            pretrain_steps: self.pretrain_steps,
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            batch_tokens: self.batch_tokens,
            beam_for_argmax: self.beam_for_argmax,
            seed: self.seed,
            clip_norm: self.clip_norm,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            target_accuracy: self.target_accuracy,
            max_eval: self.max_eval,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            num_heads: self.num_heads,
            num_encoder_layers: self.num_encoder_layers,
            num_decoder_layers: self.num_decoder_layers,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }
}

/// Preset, then config-file keys, then flag overrides.
pub fn resolve(preset_flag: Option<&str>, file: Option<&Path>, flags: Map<String, Value>) -> Result<RunConfig> {
    let file_map = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            match serde_json::from_str::<Value>(&text).with_context(|| format!("parsing {}", path.display()))? {
                Value::Object(m) => m,
                _ => bail!("{}: config must be a JSON object", path.display()),
            }
        }
        None => Map::new(),
    };
    let name = preset_flag
        .map(str::to_string)
        .or_else(|| file_map.get("preset").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| "desk".to_string());
    let Some(base) = RunConfig::preset(&name) else {
        bail!("unknown preset `{name}` (expected one of: {})", PRESETS.join(", "));
    };
    let Value::Object(mut merged) = serde_json::to_value(base)? else {
        unreachable!("a struct serializes to an object")
    };
    merged.extend(file_map);
    merged.extend(flags);
    merged.insert("preset".into(), Value::String(name));
    let cfg: RunConfig = serde_json::from_value(Value::Object(merged)).context("invalid configuration")?;
    cfg.train_config().validate()?;
    Ok(cfg)
}
