//! Small seeded decoder-only transformer with per-layer KV caches.

mod cache;
mod config;
mod generate;
mod layer;
mod layout;

pub use cache::{KvCacheSet, LayerCache};
pub use config::ModelConfig;
pub use generate::{
    GenerateOptions, GenerationState, GenerationTrace, Policies, StepOutput, StepTrace,
};
pub use layer::{self_attention, AttentionRecord, LayerCall, Mode};
pub use layout::{RowMeta, Segment, TokenLayout};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, rms_normalize, seeded_normal, sinusoidal_position, Matrix, Seed};

/// Projection and MLP weights of one decoder layer. Projections are
/// `d × d`; the gated MLP is `d × m` (gate, up) and `m × d` (down).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

/// Immutable weights; safe to share between concurrent generations.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lm_head: Matrix,
}

/// Embedded prompt plus its segment layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub embeddings: Matrix,
    pub layout: TokenLayout,
    /// Vocabulary ids of the text rows; `None` for visual rows.
    pub token_ids: Vec<Option<u32>>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let m = config.mlp_dim;
        let seed = config.seed;
        let proj = 1.0 / (d as f64).sqrt();
        let down = 1.0 / (m as f64).sqrt();
        let embed = seeded_normal(config.vocab_size, d, seed.derive(1), 1.0)?;
        let lm_head = seeded_normal(d, config.vocab_size, seed.derive(2), proj)?;
        let layers = (0..config.num_layers)
            .map(|l| {
                let s = seed.derive(1000 + l as u64);
                Ok(LayerWeights {
                    wq: seeded_normal(d, d, s.derive(0), proj)?,
                    wk: seeded_normal(d, d, s.derive(1), proj)?,
                    wv: seeded_normal(d, d, s.derive(2), proj)?,
                    wo: seeded_normal(d, d, s.derive(3), proj)?,
                    w_gate: seeded_normal(d, m, s.derive(4), proj)?,
                    w_up: seeded_normal(d, m, s.derive(5), proj)?,
                    w_down: seeded_normal(m, d, s.derive(6), down)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            embed,
            layers,
            lm_head,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    /// Token embedding plus the absolute encoding of `position`.
    pub fn embed_token(&self, token: u32, position: usize) -> Result<Vec<f64>> {
        if token as usize >= self.config.vocab_size {
            return Err(Error::config(format!("token id {token} outside vocabulary")));
        }
        let pe = sinusoidal_position(position, self.config.model_dim);
        Ok(self
            .embed
            .row(token as usize)
            .iter()
            .zip(pe)
            .map(|(e, p)| e + p)
            .collect())
    }

    /// Lays out `[system | visual | instruction]`. Text rows are random
    /// vocabulary ids run through the embedding table; visual rows are
    /// seeded continuous vectors standing in for projector output.
    pub fn build_prompt(
        &self,
        n_system: usize,
        n_visual: usize,
        n_instruction: usize,
        seed: Seed,
    ) -> Result<Prompt> {
        let layout = TokenLayout::new(n_system, n_visual, n_instruction);
        let n = layout.len();
        if n == 0 {
            return Err(Error::config("prompt is empty"));
        }
        if n > self.config.max_positions {
            return Err(Error::config(format!(
                "prompt length {n} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let d = self.config.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.derive(0).0);
        let visual = seeded_normal(n_visual.max(1), d, seed.derive(1), 1.0)?;
        let mut embeddings = Matrix::zeros(n, d);
        let mut token_ids = Vec::with_capacity(n);
        for (row, meta) in layout.prompt_rows().into_iter().enumerate() {
            let v = if meta.segment == Segment::Visual {
                token_ids.push(None);
                let pe = sinusoidal_position(meta.position, d);
                visual
                    .row(meta.position - n_system)
                    .iter()
                    .zip(pe)
                    .map(|(e, p)| e + p)
                    .collect()
            } else {
                let id = rng.random_range(0..self.config.vocab_size as u32);
                token_ids.push(Some(id));
                self.embed_token(id, meta.position)?
            };
            embeddings.row_mut(row).copy_from_slice(&v);
        }
        Ok(Prompt {
            embeddings,
            layout,
            token_ids,
        })
    }

    /// LM-head logits for one final hidden row.
    pub fn logits(&self, hidden_row: &[f64]) -> Result<Vec<f64>> {
        let h = Matrix::from_vec(1, hidden_row.len(), rms_normalize(hidden_row))?;
        Ok(matmul(&h, &self.lm_head)?.into_data())
    }
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}
