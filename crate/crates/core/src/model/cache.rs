use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::layout::{RowMeta, Segment};

/// Key/value store for one layer.
#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    pub keys: Matrix,
    pub values: Matrix,
    pub rows: Vec<RowMeta>,
    /// Visual positions in descending prefill-attention order. Annealing
    /// keeps prefixes of this list.
    pub ranking: Vec<usize>,
    /// Visual entries present right after prefill.
    pub prefill_visual: usize,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn visual_count(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.segment == Segment::Visual)
            .count()
    }

    pub fn visual_positions(&self) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.segment == Segment::Visual)
            .map(|r| r.position)
            .collect()
    }

    pub fn non_visual_positions(&self) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.segment != Segment::Visual)
            .map(|r| r.position)
            .collect()
    }

    /// Replaces the cache contents with a prefill block.
    pub fn fill(&mut self, keys: Matrix, values: Matrix, rows: Vec<RowMeta>) -> Result<()> {
        if keys.rows() != rows.len() || values.rows() != rows.len() {
            return Err(Error::state("prefill key/value rows do not match metadata"));
        }
        self.keys = keys;
        self.values = values;
        self.rows = rows;
        self.prefill_visual = self.visual_count();
        Ok(())
    }

    pub fn append(&mut self, key: &[f64], value: &[f64], meta: RowMeta) -> Result<()> {
        self.keys.push_row(key)?;
        self.values.push_row(value)?;
        self.rows.push(meta);
        Ok(())
    }

    /// Drops visual entries whose position is not in `keep`. Non-visual
    /// rows are untouched.
    pub fn retain_visual(&mut self, keep: &HashSet<usize>) {
        let flags: Vec<bool> = self
            .rows
            .iter()
            .map(|r| r.segment != Segment::Visual || keep.contains(&r.position))
            .collect();
        self.keys.retain_rows(|i| flags[i]);
        self.values.retain_rows(|i| flags[i]);
        let mut i = 0;
        self.rows.retain(|_| {
            let k = flags[i];
            i += 1;
            k
        });
    }
}

/// Per-layer caches for one generation.
#[derive(Debug, Clone, Default)]
pub struct KvCacheSet {
    pub layers: Vec<LayerCache>,
}

impl KvCacheSet {
    pub fn new(num_layers: usize) -> Self {
        Self {
            layers: vec![LayerCache::default(); num_layers],
        }
    }

    pub fn visual_counts(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::visual_count).collect()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::len).collect()
    }
}
