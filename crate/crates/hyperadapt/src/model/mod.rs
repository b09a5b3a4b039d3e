//! The main network: a miniature text-to-text encoder-decoder transformer
//! with one adapter slot per layer, plus tokenizer and checkpoint I/O.

mod adapters;
mod checkpoint;
mod transformer;
mod vocab;

pub use adapters::{adapter_apply, apply_adapter_graph, AdapterParams, AdapterSet, AdapterVars};
pub use checkpoint::{load_checkpoint, save_checkpoint, TensorEntry, FORMAT_VERSION};
pub use transformer::{attention, encoder_layer, MainNetwork, LN_EPS};
pub(crate) use transformer::{ones_row, xavier};
pub use vocab::{concat_input, Vocab, BOS_ID, EOS_ID, PAD_ID, RESERVED_TOKENS, SEP_ID, UNK_ID};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("config: {0}")]
    Config(String),
    #[error("input too long: {needed} tokens needed before any source fits, max_len is {max_len}")]
    InputTooLong { needed: usize, max_len: usize },
    #[error("target is empty")]
    EmptyTarget,
    #[error("vocab: {0}")]
    Vocab(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Element width used for training and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Model width (hidden size).
    pub h: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Adapter bottleneck width.
    pub adapter_width: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    /// Desk-scale defaults; vocab size depends on the corpus.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_enc_layers: 2,
            n_dec_layers: 2,
            h: 64,
            n_heads: 4,
            ffn_width: 128,
            vocab_size,
            max_len: 64,
            adapter_width: 8,
            precision: Precision::F32,
        }
    }

    /// Smallest config that still exercises every code path; used by the
    /// gradient checker.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            n_enc_layers: 1,
            n_dec_layers: 1,
            h: 8,
            n_heads: 2,
            ffn_width: 16,
            vocab_size,
            max_len: 32,
            adapter_width: 2,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.n_heads == 0 || self.h % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "n_heads ({}) must divide h ({})",
                self.n_heads, self.h
            )));
        }
        if self.adapter_width == 0 {
            return Err(ModelError::Config("adapter_width must be >= 1".into()));
        }
        if self.max_len < 2 {
            return Err(ModelError::Config("max_len must be >= 2".into()));
        }
        if self.vocab_size <= RESERVED_TOKENS.len() {
            return Err(ModelError::Config(format!(
                "vocab_size ({}) must exceed the {} reserved tokens",
                self.vocab_size,
                RESERVED_TOKENS.len()
            )));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(ModelError::Config("need at least one encoder and one decoder layer".into()));
        }
        if self.ffn_width == 0 {
            return Err(ModelError::Config("ffn_width must be >= 1".into()));
        }
        Ok(())
    }

    /// Flat length of one layer's adapter parameters:
    /// `2*h*a + a + h` (W_down h*a, b_down a, W_up a*h, b_up h).
    pub fn adapter_param_len(&self) -> usize {
        2 * self.h * self.adapter_width + self.adapter_width + self.h
    }

    /// Main-network parameter count, excluding adapters.
    ///
    /// Closed form, with H = h, F = ffn_width, V = vocab_size, L = max_len:
    ///   embeddings: V*H + L*H            (token table tied with the output
    ///                                     projection; one position table
    ///                                     shared by encoder and decoder)
    ///   attention block: 4*H*H           (wq, wk, wv, wo; no biases)
    ///   feed-forward:   2*H*F + F + H    (w1 + b1 + w2 + b2)
    ///   layer norm:     2*H              (gain + bias)
    ///   encoder layer:  attention + ffn + 2 norms
    ///   decoder layer:  2*attention + ffn + 3 norms
    pub fn param_count(&self) -> usize {
        let h = self.h;
        let attn = 4 * h * h;
        let ffn = 2 * h * self.ffn_width + self.ffn_width + h;
        let ln = 2 * h;
        let enc_layer = attn + ffn + 2 * ln;
        let dec_layer = 2 * attn + ffn + 3 * ln;
        self.vocab_size * h
            + self.max_len * h
            + self.n_enc_layers * enc_layer
            + self.n_dec_layers * dec_layer
    }

    /// Total number of transformer layers (adapter slots).
    pub fn n_layers(&self) -> usize {
        self.n_enc_layers + self.n_dec_layers
    }
}
