//! Architecture descriptor for the toy decoder-only transformer.

use alloc::format;

use crate::error::CoreError;
use crate::Result;

/// Shape of a decoder-only transformer. Drives both the live model and
/// the closed-form parameter budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Feed-forward width; conventionally `4 * d_model`.
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Config with the conventional `d_ffn = 4 * d_model`.
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        ModelConfig { n_layers, d_model, n_heads, d_ffn: 4 * d_model, vocab_size, max_seq_len }
    }

    /// Overrides the feed-forward width.
    pub fn with_d_ffn(mut self, d_ffn: usize) -> Self {
        self.d_ffn = d_ffn;
        self
    }

    /// The default desk-scale training configuration: 2 layers,
    /// `d_model = 64`, 4 heads, vocabulary 64, sequences up to 32.
    pub fn toy() -> Self {
        ModelConfig::new(2, 64, 4, 64, 32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_ffn == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return Err(CoreError::Config("all model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total scalar parameters of a model with this shape (embeddings,
    /// positions, blocks, final norm, untied output head).
    pub fn total_params(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ffn;
        let per_block = 4 * d * d      // w_q, w_k, w_v, w_o
            + 4 * d                    // their biases
            + f * d + f                // mlp up
            + d * f + d                // mlp down
            + 2 * (2 * d); // ln1, ln2 (scale + shift each)
        self.vocab_size * d            // embedding
            + self.max_seq_len * d     // positions
            + self.n_layers * per_block
            + 2 * d                    // final layer norm
            + self.vocab_size * d // output head
    }

    /// Scalars in bias vectors plus layer-norm shifts — the set trained
    /// by the bias-only strategy.
    pub fn bias_and_ln_shift_params(&self) -> usize {
        let d = self.d_model;
        let per_block = 4 * d          // attention projection biases
            + self.d_ffn + d           // mlp biases
            + 2 * d; // ln1.beta, ln2.beta
        self.n_layers * per_block + d // + ln_f.beta
    }

    /// Scalars in bias vectors only (no layer-norm shifts).
    pub fn bias_params(&self) -> usize {
        self.n_layers * (4 * self.d_model + self.d_ffn + self.d_model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_use_four_times_d_model() {
        let c = ModelConfig::new(2, 64, 4, 64, 32);
        assert_eq!(c.d_ffn, 256);
        assert_eq!(c.with_d_ffn(128).d_ffn, 128);
    }

    #[test]
    fn validation_catches_head_mismatch() {
        let c = ModelConfig::new(2, 64, 5, 64, 32);
        assert!(c.validate().is_err());
        assert!(ModelConfig::toy().validate().is_ok());
    }

    #[test]
    fn toy_total_params_closed_form() {
        // Worked by hand for L=2, d=64, f=256, vocab=64, seq=32.
        let c = ModelConfig::toy();
        let per_block = 4 * 64 * 64 + 4 * 64 + 256 * 64 + 256 + 64 * 256 + 64 + 256;
        assert_eq!(c.total_params(), 64 * 64 + 32 * 64 + 2 * per_block + 128 + 64 * 64);
        assert_eq!(c.total_params(), 110_336);
    }
}
