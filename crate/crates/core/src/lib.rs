//! Desk-scale decoder-only transformer engine for studying visual-token
//! trimming in multimodal inference.
//!
//! The engine runs a small seeded decoder over a prompt laid out as
//! `[system | visual | instruction | output]` and exposes three trimming
//! mechanisms:
//!
//! - [`pruning`]: progressive attention-ranked retention of visual tokens at
//!   scheduled layers during prefill, plus FastV-style and VTW-style
//!   baselines.
//! - [`annealing`]: per-step shrinkage of each layer's visual KV-cache
//!   entries following a cosine (or linear / exponential) attenuation law.
//! - [`heredity`]: lazy layers that reuse the most recent attention matrix
//!   instead of computing their own queries and keys.
//!
//! [`cost`] gives the analytic FLOPs / KV-byte accounting for the same
//! configurations at deployment-scale dimensions, and [`analytics`] turns
//! recorded attention rows into layer-similarity matrices, visual-share
//! series and step overlap.

pub mod analytics;
pub mod annealing;
pub mod cli;
pub mod cost;
pub mod error;
pub mod heredity;
pub mod model;
pub mod pruning;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{
    AttentionRecord, GenerateOptions, GenerationState, GenerationTrace, Model, ModelConfig,
    Policies, Prompt, Segment, StepTrace, TokenLayout,
};
pub use tensor::{Matrix, Seed};
