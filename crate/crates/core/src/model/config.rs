use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub decoder_layers: usize,
    pub tam_encoder_layers: usize,
    /// Set from the vocabulary when a model is built.
    pub vocab_size: usize,
    pub max_len: usize,
    /// Standard deviation of the Gaussian noise on the one-hot source.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Builds the tree-aware branch. Off gives the plain sequence model.
    pub tam: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy(0)
    }
}

impl ModelConfig {
    /// Full-size decoder dimensions.
    pub fn full_size(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: 256,
            heads: 8,
            d_ff: 1024,
            decoder_layers: 3,
            ..ModelConfig::toy(vocab_size)
        }
    }

    pub fn toy(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: 64,
            heads: 4,
            d_ff: 128,
            decoder_layers: 2,
            tam_encoder_layers: 1,
            vocab_size,
            max_len: 64,
            noise_sigma: 0.1,
            seed: 7,
            tam: true,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(ModelError::Config("noise_sigma must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}
