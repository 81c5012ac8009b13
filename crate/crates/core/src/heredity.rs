//! Lazy layers that reuse the most recent attention matrix.
//!
//! A lazy layer still projects its own values and still runs its MLP, but
//! skips the query/key projections and the score softmax: it multiplies the
//! attention probabilities computed by its nearest non-lazy ancestor with
//! its own values.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::pruning::PruneSchedule;
use crate::tensor::{matmul, Matrix};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HereditySpec {
    pub lazy_layers: BTreeSet<usize>,
}

impl HereditySpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            lazy_layers: layers.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lazy_layers.is_empty()
    }

    pub fn is_lazy(&self, layer: usize) -> bool {
        self.lazy_layers.contains(&layer)
    }

    /// Nearest non-lazy layer below `layer`, if any.
    pub fn source_of(&self, layer: usize) -> Option<usize> {
        (0..layer).rev().find(|l| !self.is_lazy(*l))
    }

    /// Rejects lazy sets without an ancestor, out-of-range layers, and any
    /// lazy span crossed by a prune (the cached matrix would no longer match
    /// the token count).
    pub fn validate(&self, schedule: &PruneSchedule, num_layers: usize) -> Result<()> {
        if self.is_lazy(0) {
            return Err(Error::config("layer 0 cannot be lazy: it has no ancestor"));
        }
        if let Some(&l) = self.lazy_layers.iter().find(|&&l| l >= num_layers) {
            return Err(Error::config(format!(
                "lazy layer {l} out of range for {num_layers} layers"
            )));
        }
        let prunes = schedule.prune_layers(num_layers);
        for &lazy in &self.lazy_layers {
            // layer 0 is never lazy, so a source always exists here
            let source = self.source_of(lazy).unwrap_or(0);
            if let Some(p) = prunes.iter().find(|&&p| p > source && p <= lazy) {
                return Err(Error::config(format!(
                    "lazy layer {lazy} inherits from layer {source} across prune layer {p}"
                )));
            }
        }
        Ok(())
    }
}

impl FromStr for HereditySpec {
    type Err = Error;

    /// Parses `"29,30,31"`; an empty string is the empty set.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = BTreeSet::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let l = part
                .parse()
                .map_err(|_| Error::config(format!("bad lazy layer index {part:?}")))?;
            set.insert(l);
        }
        Ok(Self { lazy_layers: set })
    }
}

impl fmt::Display for HereditySpec {
    /// Comma-separated, the form `from_str` accepts.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.lazy_layers.iter().map(|l| l.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl Serialize for HereditySpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.lazy_layers.serialize(s)
    }
}

impl<'de> Deserialize<'de> for HereditySpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            List(BTreeSet<usize>),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::List(l) => Ok(Self { lazy_layers: l }),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Most recent per-head attention probabilities (the reuse cache).
#[derive(Debug, Clone, Default)]
pub struct AttentionCache {
    latest: Option<Vec<Matrix>>,
}

impl AttentionCache {
    pub fn push(&mut self, heads: Vec<Matrix>) {
        self.latest = Some(heads);
    }

    pub fn latest(&self) -> Option<&[Matrix]> {
        self.latest.as_deref()
    }

    pub fn clear(&mut self) {
        self.latest = None;
    }
}

/// `cached · values` for one head.
pub fn lazy_attention(cached: &Matrix, values: &Matrix) -> Result<Matrix> {
    if cached.cols() != values.rows() {
        return Err(Error::state(format!(
            "inherited attention covers {} tokens but the layer has {}",
            cached.cols(),
            values.rows()
        )));
    }
    matmul(cached, values)
}
