//! Step-wise shrinkage of visual KV-cache entries during decoding.
//!
//! At generation length `t` every layer keeps `floor(n₀ · β(t))` visual
//! entries where `n₀` is that layer's visual count right after prefill. The
//! kept entries are always a prefix of the layer's prefill ranking, so the
//! retained set only ever shrinks.

use std::collections::HashSet;
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GenerationState;
use crate::pruning::select_top;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttenuationKind {
    #[default]
    None,
    Cosine,
    Linear,
    Exponential,
}

impl FromStr for AttenuationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "cosine" | "cos" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            "exponential" | "exp" => Ok(Self::Exponential),
            other => Err(Error::config(format!("unknown attenuation kind {other:?}"))),
        }
    }
}

impl fmt::Display for AttenuationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Cosine => "cosine",
            Self::Linear => "linear",
            Self::Exponential => "exponential",
        })
    }
}

/// Attenuation law. `tau` drives cosine and linear, `sigma` exponential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttenuationSpec {
    pub kind: AttenuationKind,
    pub tau: f64,
    pub sigma: f64,
}

impl Default for AttenuationSpec {
    fn default() -> Self {
        Self {
            kind: AttenuationKind::None,
            tau: 50.0,
            sigma: 10.0,
        }
    }
}

impl AttenuationSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn cosine(tau: f64) -> Self {
        Self {
            kind: AttenuationKind::Cosine,
            tau,
            ..Self::default()
        }
    }

    pub fn linear(tau: f64) -> Self {
        Self {
            kind: AttenuationKind::Linear,
            tau,
            ..Self::default()
        }
    }

    pub fn exponential(sigma: f64) -> Self {
        Self {
            kind: AttenuationKind::Exponential,
            sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AttenuationKind::Cosine | AttenuationKind::Linear
                if !(self.tau > 0.0 && self.tau.is_finite()) =>
            {
                Err(Error::config(format!("tau must be positive, got {}", self.tau)))
            }
            AttenuationKind::Exponential if !(self.sigma > 0.0 && self.sigma.is_finite()) => Err(
                Error::config(format!("sigma must be positive, got {}", self.sigma)),
            ),
            _ => Ok(()),
        }
    }
}

/// Retained visual fraction after `generated` output tokens.
pub fn beta(spec: &AttenuationSpec, generated: usize) -> Result<f64> {
    spec.validate()?;
    let t = generated as f64;
    Ok(match spec.kind {
        AttenuationKind::None => 1.0,
        AttenuationKind::Cosine => {
            if t < spec.tau {
                (t * FRAC_PI_2 / spec.tau).cos()
            } else {
                0.0
            }
        }
        AttenuationKind::Linear => (1.0 - t / spec.tau).max(0.0),
        AttenuationKind::Exponential => (-t / spec.sigma).exp(),
    })
}

/// `floor(prefill_count · β)`, tolerant of products that land a hair
/// below an integer.
pub fn target_count(prefill_count: usize, beta: f64) -> usize {
    let x = prefill_count as f64 * beta;
    ((x + 1e-9).floor().max(0.0) as usize).min(prefill_count)
}

/// Trims every layer's visual cache to the annealed target for the current
/// generation length. Non-visual rows are never touched.
pub fn anneal_caches(state: &mut GenerationState, spec: &AttenuationSpec) -> Result<()> {
    let b = beta(spec, state.step)?;
    if spec.kind == AttenuationKind::None {
        return Ok(());
    }
    for cache in &mut state.caches.layers {
        let target = target_count(cache.prefill_visual, b).min(cache.ranking.len());
        let current = cache.visual_count();
        if target >= current {
            continue;
        }
        let keep: HashSet<usize> = cache.ranking[..target].iter().copied().collect();
        cache.retain_visual(&keep);
    }
    Ok(())
}

/// `|Top_k(first) ∩ Top_k(n)| / |Top_k(first)|` for every step `n`.
///
/// All score vectors must range over the same visual tokens in the same
/// order.
pub fn overlap(step_scores: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
    let Some(first) = step_scores.first() else {
        return Ok(Vec::new());
    };
    if step_scores.iter().any(|s| s.len() != first.len()) {
        return Err(Error::config(
            "overlap needs every step scored over the same visual tokens",
        ));
    }
    let base: HashSet<usize> = select_top(first, k).ranked.into_iter().collect();
    if base.is_empty() {
        return Err(Error::config("overlap undefined: empty top-k at the first step"));
    }
    Ok(step_scores
        .iter()
        .map(|s| {
            let top = select_top(s, k).ranked;
            let hits = top.iter().filter(|i| base.contains(i)).count();
            hits as f64 / base.len() as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_values() {
        let s = AttenuationSpec::cosine(50.0);
        assert_eq!(beta(&s, 0).unwrap(), 1.0);
        assert_eq!(beta(&s, 50).unwrap(), 0.0);
        assert_eq!(beta(&s, 70).unwrap(), 0.0);
        assert!((beta(&s, 25).unwrap() - 0.5f64.sqrt()).abs() < 1e-9);
        assert!((beta(&s, 25).unwrap() - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn other_kinds() {
        assert_eq!(beta(&AttenuationSpec::none(), 1000).unwrap(), 1.0);
        let lin = AttenuationSpec::linear(10.0);
        assert!((beta(&lin, 4).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(beta(&lin, 10).unwrap(), 0.0);
        assert_eq!(beta(&lin, 15).unwrap(), 0.0);
        let e = AttenuationSpec::exponential(5.0);
        assert!((beta(&e, 5).unwrap() - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn invalid_parameters() {
        assert!(beta(&AttenuationSpec::cosine(0.0), 1).is_err());
        assert!(beta(&AttenuationSpec::linear(-1.0), 1).is_err());
        assert!(beta(&AttenuationSpec::exponential(0.0), 1).is_err());
    }

    #[test]
    fn target_count_example() {
        let b = beta(&AttenuationSpec::cosine(50.0), 25).unwrap();
        assert_eq!(target_count(288, b), 203);
        assert_eq!(target_count(10, 0.8), 8);
    }

    #[test]
    fn overlap_examples() {
        // top-4 sets {1,2,3,4} and {2,3,4,5}
        let a = vec![0.0, 0.9, 0.8, 0.7, 0.6, 0.1];
        let b = vec![0.0, 0.1, 0.8, 0.7, 0.6, 0.9];
        let o = overlap(&[a.clone(), b], 4).unwrap();
        assert_eq!(o, vec![1.0, 0.75]);
        let same = overlap(&[a.clone(), a.clone(), a], 3).unwrap();
        assert!(same.iter().all(|&x| x == 1.0));
        assert!(overlap(&[vec![0.1, 0.2]], 0).is_err());
        assert!(overlap(&[vec![0.1, 0.2], vec![0.1]], 1).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_concave_on_support(tau in 2u32..200) {
            let s = AttenuationSpec::cosine(tau as f64);
            let b: Vec<f64> = (0..tau as usize).map(|t| beta(&s, t).unwrap()).collect();
            for w in b.windows(3) {
                prop_assert!(w[2] - 2.0 * w[1] + w[0] <= 1e-15);
            }
            prop_assert!(b.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn beta_in_unit_interval(kind in 0u8..4, param in 0.5f64..100.0, t in 0usize..400) {
            let spec = match kind {
                0 => AttenuationSpec::none(),
                1 => AttenuationSpec::cosine(param),
                2 => AttenuationSpec::linear(param),
                _ => AttenuationSpec::exponential(param),
            };
            let b = beta(&spec, t).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
            prop_assert_eq!(beta(&spec, 0).unwrap(), 1.0);
        }
    }
}
