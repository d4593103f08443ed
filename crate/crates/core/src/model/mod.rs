//! Transformer encoder, the insertion decoder with its factored
//! position/token head, and a left-to-right baseline decoder.

mod baseline;
mod insertion;
mod layers;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Checkpoint, CheckpointError, ParamStore, TensorError};
use crate::trajectory::TrajectoryError;

pub use baseline::{BaselineModel, BaselineOutput, BaselineState, BaselineStep};
pub use insertion::{insertion_head, insertion_token_mask, EncodedSources, InsertionModel, InsertionOutput};
pub use layers::{positional_encoding, Dropout, EncodedBatch, KvCache};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what} length {len} exceeds max_len {max}")]
    TooLong { what: &'static str, len: usize, max: usize },
    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Small default that trains on a laptop CPU.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            num_heads: 2,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            ffn_dim: 128,
            max_len: 32,
            dropout: 0.0,
        }
    }

    /// The Transformer "base" shape.
    pub fn transformer_base(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 512,
            num_heads: 8,
            num_encoder_layers: 6,
            num_decoder_layers: 6,
            ffn_dim: 2048,
            max_len: 256,
            dropout: 0.1,
        }
    }

    /// Two-layer `d = 8` model for gradient checks and exact oracles.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 8,
            num_heads: 2,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            ffn_dim: 16,
            max_len: 16,
            dropout: 0.0,
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk(vocab_size)),
            "transformer_base" | "base" => Some(Self::transformer_base(vocab_size)),
            "tiny" => Some(Self::tiny(vocab_size)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.vocab_size <= crate::tasks::NUM_RESERVED {
            return bad(format!("vocab_size {} leaves no data tokens", self.vocab_size));
        }
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.ffn_dim == 0 || self.max_len < 2 {
            return bad("ffn_dim must be positive and max_len at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// `key=value` pairs for the checkpoint manifest.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        [
            ("vocab_size", self.vocab_size.to_string()),
            ("d_model", self.d_model.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("num_encoder_layers", self.num_encoder_layers.to_string()),
            ("num_decoder_layers", self.num_decoder_layers.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("max_len", self.max_len.to_string()),
            ("dropout", self.dropout.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_meta(ckpt: &Checkpoint) -> Result<Self> {
        fn get<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
            ckpt.meta_value(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| ModelError::Config(format!("checkpoint lacks a valid `{key}`")))
        }
        let cfg = Self {
            vocab_size: get(ckpt, "vocab_size")?,
            d_model: get(ckpt, "d_model")?,
            num_heads: get(ckpt, "num_heads")?,
            num_encoder_layers: get(ckpt, "num_encoder_layers")?,
            num_decoder_layers: get(ckpt, "num_decoder_layers")?,
            ffn_dim: get(ckpt, "ffn_dim")?,
            max_len: get(ckpt, "max_len")?,
            dropout: get(ckpt, "dropout")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which decoder a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Insertion,
    Baseline,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Insertion => "insertion",
            ModelKind::Baseline => "baseline",
        }
    }
}

/// Shared access to a model's configuration and parameters.
pub trait Model {
    const KIND: ModelKind;

    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    fn checkpoint(&self, extra: &[(String, String)]) -> Checkpoint {
        let mut meta = vec![("model".to_string(), Self::KIND.name().to_string())];
        meta.extend(self.config().to_meta());
        meta.extend(extra.iter().cloned());
        Checkpoint::from_store(meta, self.params())
    }

    fn save(&self, path: &Path, extra: &[(String, String)]) -> Result<()> {
        Ok(self.checkpoint(extra).save(path)?)
    }
}

/// Reads the model kind recorded in a checkpoint.
pub fn checkpoint_kind(ckpt: &Checkpoint) -> Result<ModelKind> {
    match ckpt.meta_value("model") {
        Some("insertion") => Ok(ModelKind::Insertion),
        Some("baseline") => Ok(ModelKind::Baseline),
        other => Err(ModelError::Config(format!("unknown checkpoint model kind {other:?}"))),
    }
}

pub(crate) fn check_tokens(tokens: &[u32], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(&token) => Err(ModelError::TokenOutOfRange { token, vocab }),
        None => Ok(()),
    }
}

pub(crate) fn check_len(what: &'static str, len: usize, max: usize) -> Result<()> {
    if len > max {
        Err(ModelError::TooLong { what, len, max })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests;
