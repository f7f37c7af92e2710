//! Graph encoder, user gate, causal self-attention encoder and the fusion
//! head that produces next-item scores.

mod network;
mod params;

pub use network::{
    causal_mask, fuse, gnn_encode, item_scores, transformer_encode, user_gate, RowForward, RowInput, TransformerOutput,
    forward_row,
};
pub use params::{AttentionLayer, ModelParams, ParamVars, Params};

use thiserror::Error;

use crate::numerics::{Checkpoint, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Architecture hyper-parameters; stored with every checkpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub item_count: usize,
    pub user_count: usize,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.item_count == 0 || self.user_count == 0 {
            return bad("empty item or user vocabulary".into());
        }
        Ok(())
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        [
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("layers", self.layers.to_string()),
            ("max_len", self.max_len.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("item_count", self.item_count.to_string()),
            ("user_count", self.user_count.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_meta(ck: &Checkpoint) -> Result<Self, EncoderError> {
        fn field<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T, EncoderError> {
            ck.meta_value(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| EncoderError::InvalidConfig(format!("checkpoint lacks a valid `{key}`")))
        }
        let cfg = ModelConfig {
            dim: field(ck, "dim")?,
            heads: field(ck, "heads")?,
            layers: field(ck, "layers")?,
            max_len: field(ck, "max_len")?,
            dropout: field(ck, "dropout")?,
            item_count: field(ck, "item_count")?,
            user_count: field(ck, "user_count")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests;
