//! Analytic FLOPs and KV-cache byte accounting.
//!
//! Counts two ops per multiply-accumulate over the decoder layers only
//! (projections, attention scores, attention-weighted values, gated MLP).
//! Softmax, normalisation, embedding and the LM head are left out.

use serde::{Deserialize, Serialize};

use crate::annealing::{beta, target_count, AttenuationSpec};
use crate::error::{Error, Result};
use crate::heredity::HereditySpec;
use crate::pruning::{schedule_keep_counts, PruneSchedule};

/// Prefill cost of one layer over `n` tokens.
///
/// Full layer: `8nd² + 4n²d + 6ndm`. Lazy layer (value and output
/// projections plus attention-weighted values only): `4nd² + 2n²d + 6ndm`.
pub fn layer_flops_prefill(n: u64, d: u64, m: u64, lazy: bool) -> u64 {
    if lazy {
        4 * n * d * d + 2 * n * n * d + 6 * n * d * m
    } else {
        8 * n * d * d + 4 * n * n * d + 6 * n * d * m
    }
}

/// Decode cost of one layer for a single new token attending over
/// `cache_len` entries (the new token included).
pub fn layer_flops_decode(cache_len: u64, d: u64, m: u64, lazy: bool) -> u64 {
    if lazy {
        4 * d * d + 2 * cache_len * d + 6 * d * m
    } else {
        8 * d * d + 4 * cache_len * d + 6 * d * m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub kv_bytes_per_element: usize,
    pub batch: usize,
    /// System plus instruction tokens.
    pub n_text: usize,
    pub n_visual: usize,
}

impl Default for CostConfig {
    /// 7B-class dimensions with a 576-token image and half-precision cache.
    fn default() -> Self {
        Self {
            num_layers: 32,
            model_dim: 4096,
            mlp_dim: 11008,
            kv_bytes_per_element: 2,
            batch: 16,
            n_text: 128,
            n_visual: 576,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("model_dim", self.model_dim),
            ("mlp_dim", self.mlp_dim),
            ("kv_bytes_per_element", self.kv_bytes_per_element),
            ("batch", self.batch),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub prefill_flops: u64,
    /// One entry per decode step, starting at step 1.
    pub decode_flops: Vec<u64>,
    pub total_flops: u64,
    pub peak_kv_bytes: u64,
    /// KV bytes per step, starting at step 0 (right after prefill).
    pub kv_bytes: Vec<u64>,
    /// Visual entries per layer at each step.
    pub retained: Vec<Vec<usize>>,
}

/// Cache bytes at `step` given per-layer retained visual counts.
pub fn kv_bytes(cfg: &CostConfig, retained: &[usize], step: usize) -> u64 {
    let per_token = 2 * cfg.model_dim as u64 * cfg.kv_bytes_per_element as u64 * cfg.batch as u64;
    retained
        .iter()
        .map(|&v| (v + cfg.n_text + step) as u64 * per_token)
        .sum()
}

/// Prefill plus `gen_len - 1` decode steps (the first token comes from
/// prefill), with annealed visual caches and lazy layers discounted.
pub fn pipeline_flops(
    cfg: &CostConfig,
    schedule: &PruneSchedule,
    heredity: &HereditySpec,
    attenuation: &AttenuationSpec,
    gen_len: usize,
) -> Result<CostReport> {
    cfg.validate()?;
    attenuation.validate()?;
    let num_layers = cfg.num_layers;
    if num_layers == 0 {
        return Ok(CostReport {
            prefill_flops: 0,
            decode_flops: vec![0; gen_len.saturating_sub(1)],
            total_flops: 0,
            peak_kv_bytes: 0,
            kv_bytes: vec![0; gen_len.max(1)],
            retained: vec![Vec::new(); gen_len.max(1)],
        });
    }
    heredity.validate(schedule, num_layers)?;
    let keep = schedule_keep_counts(num_layers, schedule, cfg.n_visual)?;
    let (d, m) = (cfg.model_dim as u64, cfg.mlp_dim as u64);

    let prefill_flops = keep
        .iter()
        .enumerate()
        .map(|(l, &k)| layer_flops_prefill((cfg.n_text + k) as u64, d, m, heredity.is_lazy(l)))
        .sum();

    let steps = gen_len.max(1);
    let mut retained = Vec::with_capacity(steps);
    retained.push(keep.clone());
    for t in 1..steps {
        let b = beta(attenuation, t)?;
        retained.push(keep.iter().map(|&k| target_count(k, b)).collect());
    }

    let decode_flops: Vec<u64> = (1..steps)
        .map(|t| {
            retained[t]
                .iter()
                .enumerate()
                .map(|(l, &v)| {
                    layer_flops_decode((cfg.n_text + v + t) as u64, d, m, heredity.is_lazy(l))
                })
                .sum()
        })
        .collect();
    let kv: Vec<u64> = retained
        .iter()
        .enumerate()
        .map(|(t, r)| kv_bytes(cfg, r, t))
        .collect();

    let total_flops = prefill_flops + decode_flops.iter().sum::<u64>();
    Ok(CostReport {
        prefill_flops,
        decode_flops,
        total_flops,
        peak_kv_bytes: kv.iter().copied().max().unwrap_or(0),
        kv_bytes: kv,
        retained,
    })
}

/// Solves `L·(8nd² + 4n²d + 6ndm) = target` for the total prompt length
/// `n` and returns `n - n_visual` (unrounded).
pub fn calibrate_text_tokens(
    num_layers: usize,
    model_dim: usize,
    mlp_dim: usize,
    n_visual: usize,
    target_flops: f64,
) -> Result<f64> {
    if num_layers == 0 || model_dim == 0 || !(target_flops > 0.0) {
        return Err(Error::config("calibration needs positive layers, width and target"));
    }
    let (l, d, m) = (num_layers as f64, model_dim as f64, mlp_dim as f64);
    let a = l * 4.0 * d;
    let b = l * (8.0 * d * d + 6.0 * d * m);
    let n = (-b + (b * b + 4.0 * a * target_flops).sqrt()) / (2.0 * a);
    let text = n - n_visual as f64;
    if text < 0.0 {
        return Err(Error::config(format!(
            "target {target_flops:e} is below the cost of {n_visual} visual tokens alone"
        )));
    }
    Ok(text)
}
