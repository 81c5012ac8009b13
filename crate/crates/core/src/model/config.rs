use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub seed: Seed,
}

impl ModelConfig {
    /// The toy configuration used throughout the tests: 8 layers, width 64.
    pub fn toy() -> Self {
        Self {
            num_layers: 8,
            model_dim: 64,
            num_heads: 4,
            mlp_dim: 128,
            vocab_size: 64,
            max_positions: 256,
            seed: Seed(0),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("mlp_dim", self.mlp_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::config("vocab_size does not fit token ids"));
        }
        Ok(())
    }
}
