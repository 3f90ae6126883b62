use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttentionMode {
    /// Every position attends to every position (masked diffusion).
    Bidirectional,
    /// Full attention inside a block, causal across blocks (block diffusion).
    BlockCausal { block_len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: Vocab,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub attention: AttentionMode,
    pub precision: Precision,
    pub tie_output: bool,
}

impl ModelConfig {
    /// Desk-scale default: d_model 128, 4 layers, 4 heads, max_len 512.
    pub fn desk(vocab: Vocab) -> Self {
        Self {
            vocab,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_len: 512,
            ffn_mult: 4,
            attention: AttentionMode::Bidirectional,
            precision: Precision::Double,
            tie_output: false,
        }
    }

    /// A model small enough for finite-difference checks.
    pub fn tiny(vocab: Vocab) -> Self {
        Self {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_len: 64,
            ffn_mult: 2,
            ..Self::desk(vocab)
        }
    }

    pub fn with_attention(mut self, attention: AttentionMode) -> Self {
        self.attention = attention;
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn block_len(&self) -> Option<usize> {
        match self.attention {
            AttentionMode::Bidirectional => None,
            AttentionMode::BlockCausal { block_len } => Some(block_len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_len", self.max_len),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if let AttentionMode::BlockCausal { block_len: 0 } = self.attention {
            return Err(Error::Config("block_causal requires block_len >= 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of this config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
