use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Encoder and decoder stacks of `layers` blocks each.
    EncoderDecoder,
    /// Encoder stack with a mean-pooled classification head.
    EncoderOnly { classes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    Sinusoidal,
    /// Trained position table, one per stack.
    Learned { max_len: usize },
}

/// Transformer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Blocks per stack.
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub architecture: Architecture,
    pub positions: Positions,
    /// Output projection reuses the token embedding (transposed).
    pub tie_embeddings: bool,
    /// Bias vectors on the four attention projections.
    pub attn_bias: bool,
    pub ln_eps: f64,
    /// Standard deviation of the base weight initialization.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small encoder-decoder used for experiments: L=2, d=32, 4 heads,
    /// d_m=128, vocabulary 32.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            heads: 4,
            d_ff: 128,
            vocab: 32,
            architecture: Architecture::EncoderDecoder,
            positions: Positions::Sinusoidal,
            tie_embeddings: false,
            attn_bias: true,
            ln_eps: 1e-5,
            init_std: 0.0,
        }
    }

    /// BART-large dimensions (shared embeddings, learned positions of length
    /// 1024). Only ever used shape-only; never allocated.
    pub fn bart_large() -> Self {
        Self {
            layers: 12,
            d_model: 1024,
            heads: 16,
            d_ff: 4096,
            vocab: 50_265,
            architecture: Architecture::EncoderDecoder,
            positions: Positions::Learned { max_len: 1024 },
            tie_embeddings: true,
            attn_bias: true,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// RoBERTa-base dimensions with a two-way classification head.
    pub fn roberta_base() -> Self {
        Self {
            layers: 12,
            d_model: 768,
            heads: 12,
            d_ff: 3072,
            vocab: 50_265,
            architecture: Architecture::EncoderOnly { classes: 2 },
            positions: Positions::Learned { max_len: 514 },
            tie_embeddings: false,
            attn_bias: true,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Attention sublayers per counted layer (one encoder plus one decoder
    /// block count as a single layer for encoder-decoder models).
    pub fn attn_sublayers_per_layer(&self) -> usize {
        match self.architecture {
            Architecture::EncoderDecoder => 3,
            Architecture::EncoderOnly { .. } => 1,
        }
    }

    pub fn ffn_sublayers_per_layer(&self) -> usize {
        match self.architecture {
            Architecture::EncoderDecoder => 2,
            Architecture::EncoderOnly { .. } => 1,
        }
    }

    pub fn is_encoder_decoder(&self) -> bool {
        matches!(self.architecture, Architecture::EncoderDecoder)
    }

    /// Standard deviation actually used for base weights; `init_std == 0`
    /// selects `1/√d`.
    pub fn effective_init_std(&self) -> f64 {
        if self.init_std > 0.0 {
            self.init_std
        } else {
            1.0 / (self.d_model as f64).sqrt()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("model extents must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocabulary needs at least two tokens".into()));
        }
        if self.ln_eps < 0.0 {
            return Err(Error::Config("layer-norm eps must be non-negative".into()));
        }
        if let Architecture::EncoderOnly { classes } = self.architecture {
            if classes < 2 {
                return Err(Error::Config("classifier needs at least two classes".into()));
            }
        }
        Ok(())
    }
}
