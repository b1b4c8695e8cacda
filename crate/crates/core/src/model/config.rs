// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

/// Architecture of a decoder-style transformer.
///
/// Trained toy models use pre-LN, GELU and causal attention; the compiled
/// fixtures switch layer norms off, use ReLU MLPs and (for `reverse`)
/// bidirectional attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Pre-LN: every reader normalizes its aggregated input.
    pub layer_norm: bool,
    pub activation: Activation,
    pub causal: bool,
}

impl ModelConfig {
    /// A pre-LN GELU causal config.
    pub fn toy(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize, max_seq: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_head: d_model / n_heads.max(1),
            d_mlp: 4 * d_model,
            vocab_size,
            max_seq,
            layer_norm: true,
            activation: Activation::Gelu,
            causal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config("need at least one layer and one head".into()));
        }
        if self.d_head * self.n_heads != self.d_model {
            return Err(Error::Config(format!(
                "d_head ({}) * n_heads ({}) != d_model ({})",
                self.d_head, self.n_heads, self.d_model
            )));
        }
        if self.vocab_size == 0 || self.max_seq == 0 || self.d_mlp == 0 {
            return Err(Error::Config("vocab_size, max_seq and d_mlp must be positive".into()));
        }
        Ok(())
    }

    /// Stable identity of the architecture: hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
