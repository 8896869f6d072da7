use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the shared encoder-decoder and the downstream head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub c: usize,
    pub n_patch: usize,
    pub l_prime: usize,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    pub feedforward_dim: usize,
    pub decoder_hidden: usize,
    pub head_branch_kernels: Vec<usize>,
    pub head_channels: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    /// Learned positional table added to the token embeddings.
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c: 5,
            n_patch: 10,
            l_prime: 300,
            d_model: 64,
            encoder_layers: 2,
            attention_heads: 4,
            feedforward_dim: 128,
            decoder_hidden: 128,
            head_branch_kernels: vec![3, 5, 7],
            head_channels: 32,
            num_classes: 5,
            dropout_rate: 0.1,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            c: 2,
            n_patch: 3,
            l_prime: 4,
            d_model: 8,
            encoder_layers: 1,
            attention_heads: 1,
            feedforward_dim: 12,
            decoder_hidden: 10,
            head_branch_kernels: vec![3, 5, 7],
            head_channels: 4,
            num_classes: 3,
            dropout_rate: 0.0,
            positional_encoding: true,
        }
    }

    pub fn token_width(&self) -> usize {
        self.c * self.l_prime
    }

    pub fn epoch_len(&self) -> usize {
        self.n_patch * self.l_prime
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.c < 2 {
            return bad(format!("channel count {} < 2", self.c));
        }
        if self.n_patch < 2 {
            return bad(format!("n_patch {} < 2", self.n_patch));
        }
        if [self.l_prime, self.d_model, self.encoder_layers, self.attention_heads, self.feedforward_dim, self.decoder_hidden, self.head_channels]
            .contains(&0)
        {
            return bad("sizes must be positive".into());
        }
        if self.d_model % self.attention_heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.attention_heads));
        }
        if self.head_branch_kernels.is_empty() || self.head_branch_kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("head kernels {:?} must be odd", self.head_branch_kernels));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}
