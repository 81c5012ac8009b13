use serde::{Deserialize, Serialize};

use crate::analytics::visual_share;
use crate::annealing::{anneal_caches, AttenuationKind, AttenuationSpec};
use crate::cost::{layer_flops_decode, layer_flops_prefill};
use crate::error::{Error, Result};
use crate::heredity::{AttentionCache, HereditySpec};
use crate::pruning::{apply_prune, schedule_keep_counts, select_top, should_prune, PruneKind, PruneSchedule};
use crate::tensor::Matrix;

use super::cache::KvCacheSet;
use super::layer::{AttentionRecord, LayerCall, Mode};
use super::layout::{RowMeta, Segment, TokenLayout};
use super::{argmax, Model, Prompt};

/// The three trimming mechanisms applied during one generation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Policies {
    pub schedule: PruneSchedule,
    pub attenuation: AttenuationSpec,
    pub heredity: HereditySpec,
}

impl Policies {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        self.schedule.validate(num_layers)?;
        self.attenuation.validate()?;
        self.heredity.validate(&self.schedule, num_layers)
    }

    /// `"none"` when every mechanism is off, otherwise e.g. `"pvtp+cosine+heredity"`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.schedule.kind != PruneKind::None {
            parts.push(self.schedule.kind.to_string());
        }
        if self.attenuation.kind != AttenuationKind::None {
            parts.push(self.attenuation.kind.to_string());
        }
        if !self.heredity.is_empty() {
            parts.push("heredity".to_string());
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Tokens to emit, including the one produced by prefill.
    pub max_new_tokens: usize,
    pub record_attention: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 16,
            record_attention: false,
        }
    }
}

/// Mutable state of one generation. Single-threaded by construction.
#[derive(Debug, Clone)]
pub struct GenerationState {
    pub layout: TokenLayout,
    pub caches: KvCacheSet,
    /// Generated tokens so far; always `emitted.len()`.
    pub step: usize,
    pub emitted: Vec<u32>,
    pub reuse: AttentionCache,
    /// Times a prune asked for more tokens than were present.
    pub clamp_warnings: usize,
}

/// Result of one forward pass (prefill or a decode step).
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub step: usize,
    pub token: u32,
    pub logits: Vec<f64>,
    pub records: Vec<AttentionRecord>,
    pub ops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// Generated tokens before this forward (0 = prefill).
    pub step: usize,
    pub token: u32,
    pub logits: Vec<f64>,
    /// Visual cache entries per layer seen by this forward.
    pub visual_cache: Vec<usize>,
    pub cache_len: Vec<usize>,
    /// Positions of those visual entries, per layer.
    pub visible_visual: Vec<Vec<usize>>,
    /// Mean over layers of the visual attention share.
    pub visual_share: f64,
    pub ops: u64,
    pub cumulative_ops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub tokens: Vec<u32>,
    pub steps: Vec<StepTrace>,
    /// Every layer's record at every step, when recording was requested.
    pub records: Vec<AttentionRecord>,
    /// Scheduled visual keep count per layer.
    pub keep_counts: Vec<usize>,
    /// Visual positions present at each layer during prefill.
    pub prefill_visual: Vec<Vec<usize>>,
    /// Per-layer ranking used by annealing.
    pub rankings: Vec<Vec<usize>>,
    pub clamp_warnings: usize,
}

impl GenerationTrace {
    pub fn total_ops(&self) -> u64 {
        self.steps.last().map_or(0, |s| s.cumulative_ops)
    }

    /// Records for one step, ordered by layer.
    pub fn records_at(&self, step: usize) -> Vec<&AttentionRecord> {
        let mut r: Vec<_> = self.records.iter().filter(|r| r.step == step).collect();
        r.sort_by_key(|r| r.layer);
        r
    }
}

impl Model {
    /// Runs the prompt through every layer, pruning at scheduled layers, and
    /// emits the first token.
    pub fn prefill(&self, prompt: &Prompt, policies: &Policies) -> Result<(GenerationState, StepOutput)> {
        let num_layers = self.num_layers();
        policies.validate(num_layers)?;
        let d = self.config.model_dim;
        let m = self.config.mlp_dim;
        if prompt.embeddings.rows() != prompt.layout.len() || prompt.layout.n_output != 0 {
            return Err(Error::config("prompt layout does not match its embeddings"));
        }
        let keep_counts =
            schedule_keep_counts(num_layers, &policies.schedule, prompt.layout.n_visual())?;

        let mut state = GenerationState {
            layout: prompt.layout.clone(),
            caches: KvCacheSet::new(num_layers),
            step: 0,
            emitted: Vec::new(),
            reuse: AttentionCache::default(),
            clamp_warnings: 0,
        };
        let mut hidden = prompt.embeddings.clone();
        let mut records: Vec<AttentionRecord> = Vec::with_capacity(num_layers);
        let mut inherited: Option<Vec<usize>> = None;
        let mut ops = 0u64;

        for l in 0..num_layers {
            if hidden.rows() > 1 && should_prune(l, &policies.schedule, num_layers) {
                let prev = records
                    .last()
                    .ok_or_else(|| Error::state(format!("prune at layer {l} has no prior attention")))?;
                debug_assert_eq!(prev.visual_positions, state.layout.visual_original_indices);
                let sel = select_top(&prev.visual_slice, keep_counts[l]);
                if sel.clamped {
                    state.clamp_warnings += 1;
                }
                let ranked = sel.ranked.iter().map(|&i| prev.visual_positions[i]).collect();
                let (layout, pruned) = apply_prune(&state.layout, &hidden, &sel.layout_order)?;
                state.layout = layout;
                hidden = pruned;
                inherited = Some(ranked);
            }

            let rows = state.layout.prompt_rows();
            let lazy = policies.heredity.is_lazy(l);
            let call = LayerCall {
                layer: l,
                mode: Mode::Prefill,
                step: 0,
                lazy,
            };
            let (next, rec) =
                self.decode_layer(&hidden, call, &mut state.caches.layers[l], &rows, &mut state.reuse)?;
            ops += layer_flops_prefill(rows.len() as u64, d as u64, m as u64, lazy);

            // lazy layers anneal in step with their source
            let ranking = match &inherited {
                Some(r) => r.clone(),
                None if lazy => state.caches.layers[l - 1].ranking.clone(),
                None => select_top(&rec.visual_slice, rec.visual_slice.len())
                    .ranked
                    .iter()
                    .map(|&i| rec.visual_positions[i])
                    .collect(),
            };
            state.caches.layers[l].ranking = ranking;
            records.push(rec);
            hidden = next;
        }

        let logits = self.logits(hidden.row(hidden.rows() - 1))?;
        let token = argmax(&logits);
        state.emitted.push(token);
        state.step = state.emitted.len();
        Ok((
            state,
            StepOutput {
                step: 0,
                token,
                logits,
                records,
                ops,
            },
        ))
    }

    /// Anneals the visual caches for the current length, then feeds the last
    /// emitted token through every layer and emits the next one.
    pub fn decode_step(&self, state: &mut GenerationState, policies: &Policies) -> Result<StepOutput> {
        let num_layers = self.num_layers();
        let d = self.config.model_dim;
        let m = self.config.mlp_dim;
        let token_in = *state
            .emitted
            .last()
            .ok_or_else(|| Error::state("decode step before prefill"))?;
        if state.caches.layers.len() != num_layers {
            return Err(Error::state("cache set does not match the model depth"));
        }
        let step = state.step;
        anneal_caches(state, &policies.attenuation)?;

        let position = state.layout.original_prompt_len() + step - 1;
        if position >= self.config.max_positions {
            return Err(Error::config(format!(
                "position {position} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let meta = [RowMeta {
            position,
            segment: Segment::Output,
        }];
        let mut hidden = Matrix::from_vec(1, d, self.embed_token(token_in, position)?)?;
        let mut records = Vec::with_capacity(num_layers);
        let mut ops = 0u64;
        for l in 0..num_layers {
            let lazy = policies.heredity.is_lazy(l);
            let call = LayerCall {
                layer: l,
                mode: Mode::Decode,
                step,
                lazy,
            };
            let cache = &mut state.caches.layers[l];
            let (next, rec) = self.decode_layer(&hidden, call, cache, &meta, &mut state.reuse)?;
            ops += layer_flops_decode(cache.len() as u64, d as u64, m as u64, lazy);
            records.push(rec);
            hidden = next;
        }
        state.layout.n_output += 1;

        let logits = self.logits(hidden.row(0))?;
        let token = argmax(&logits);
        state.emitted.push(token);
        state.step = state.emitted.len();
        Ok(StepOutput {
            step,
            token,
            logits,
            records,
            ops,
        })
    }

    /// Greedy generation of `max_new_tokens` tokens under `policies`.
    pub fn generate(
        &self,
        prompt: &Prompt,
        policies: &Policies,
        opts: &GenerateOptions,
    ) -> Result<GenerationTrace> {
        if opts.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens must be at least 1"));
        }
        let needed = prompt.layout.original_prompt_len() + opts.max_new_tokens;
        if needed > self.config.max_positions {
            return Err(Error::config(format!(
                "prompt plus {} new tokens needs {needed} positions, max_positions is {}",
                opts.max_new_tokens, self.config.max_positions
            )));
        }

        let (mut state, first) = self.prefill(prompt, policies)?;
        let prefill_visual: Vec<Vec<usize>> = state
            .caches
            .layers
            .iter()
            .map(|c| c.visual_positions())
            .collect();
        let rankings = state.caches.layers.iter().map(|c| c.ranking.clone()).collect();
        let keep_counts =
            schedule_keep_counts(self.num_layers(), &policies.schedule, prompt.layout.n_visual())?;

        let mut trace = GenerationTrace {
            tokens: Vec::with_capacity(opts.max_new_tokens),
            steps: Vec::with_capacity(opts.max_new_tokens),
            records: Vec::new(),
            keep_counts,
            prefill_visual,
            rankings,
            clamp_warnings: 0,
        };
        let mut cumulative = 0u64;
        let mut push = |trace: &mut GenerationTrace, state: &GenerationState, out: StepOutput| {
            cumulative += out.ops;
            let share = out.records.iter().map(visual_share).sum::<f64>() / out.records.len() as f64;
            trace.tokens.push(out.token);
            trace.steps.push(StepTrace {
                step: out.step,
                token: out.token,
                logits: out.logits,
                visual_cache: state.caches.visual_counts(),
                cache_len: state.caches.lengths(),
                visible_visual: state.caches.layers.iter().map(|c| c.visual_positions()).collect(),
                visual_share: share,
                ops: out.ops,
                cumulative_ops: cumulative,
            });
            if opts.record_attention {
                trace.records.extend(out.records);
            }
        };

        push(&mut trace, &state, first);
        for _ in 1..opts.max_new_tokens {
            let out = self.decode_step(&mut state, policies)?;
            push(&mut trace, &state, out);
        }
        trace.clamp_warnings = state.clamp_warnings;
        Ok(trace)
    }
}
