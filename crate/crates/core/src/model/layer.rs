use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heredity::{lazy_attention, AttentionCache};
use crate::tensor::{
    causal_mask, matmul, matmul_transposed, rms_normalize_rows, silu, softmax_rows, Matrix,
};

use super::cache::LayerCache;
use super::layout::{RowMeta, Segment};
use super::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Whole prompt; the layer's cache is replaced.
    Prefill,
    /// One new row appended to an existing cache.
    Decode,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerCall {
    pub layer: usize,
    pub mode: Mode,
    /// Generated tokens so far (`|O|`) when this forward runs.
    pub step: usize,
    pub lazy: bool,
}

/// Head-mean attention of the last query row at one layer and step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: usize,
    pub step: usize,
    /// Sequence position of each entry of `last_row`.
    pub positions: Vec<usize>,
    pub last_row: Vec<f64>,
    /// Positions of the visual entries, aligned with `visual_slice`.
    pub visual_positions: Vec<usize>,
    pub visual_slice: Vec<f64>,
}

impl AttentionRecord {
    fn from_heads(call: LayerCall, heads: &[Matrix], rows: &[RowMeta]) -> Self {
        let n = rows.len();
        let last = heads[0].rows() - 1;
        let mut mean = vec![0.0; n];
        for h in heads {
            for (m, &a) in mean.iter_mut().zip(h.row(last)) {
                *m += a;
            }
        }
        let inv = 1.0 / heads.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        let mut visual_positions = Vec::new();
        let mut visual_slice = Vec::new();
        for (r, &a) in rows.iter().zip(&mean) {
            if r.segment == Segment::Visual {
                visual_positions.push(r.position);
                visual_slice.push(a);
            }
        }
        Self {
            layer: call.layer,
            step: call.step,
            positions: rows.iter().map(|r| r.position).collect(),
            last_row: mean,
            visual_positions,
            visual_slice,
        }
    }
}

/// One attention head: `softmax(q·kᵀ/√d_h + mask)·v`. Returns the output
/// and the probabilities.
pub fn self_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: Option<&Matrix>,
) -> Result<(Matrix, Matrix)> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::config(format!(
            "attention shapes q {}x{}, k {}x{}, v {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = matmul_transposed(q, k)?.scale(scale);
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    let attn = softmax_rows(&scores);
    let out = matmul(&attn, v)?;
    Ok((out, attn))
}

impl Model {
    /// Pre-norm residual block: attention then gated MLP.
    ///
    /// In prefill mode `hidden` holds every current row (described by
    /// `rows`) and the cache is rebuilt; in decode mode `hidden` is the
    /// single new row, appended to the existing cache. Lazy layers take
    /// their attention probabilities from `reuse` instead of computing them.
    pub fn decode_layer(
        &self,
        hidden: &Matrix,
        call: LayerCall,
        cache: &mut LayerCache,
        rows: &[RowMeta],
        reuse: &mut AttentionCache,
    ) -> Result<(Matrix, AttentionRecord)> {
        let w = self
            .layers
            .get(call.layer)
            .ok_or_else(|| Error::config(format!("no layer {}", call.layer)))?;
        let h = self.config.num_heads;
        let hd = self.config.head_dim();
        if hidden.rows() != rows.len() {
            return Err(Error::state("hidden rows do not match row metadata"));
        }
        if call.mode == Mode::Decode {
            if hidden.rows() != 1 {
                return Err(Error::state("decode mode takes exactly one row"));
            }
            if cache.is_empty() {
                return Err(Error::state(format!(
                    "layer {} has no cache to decode against",
                    call.layer
                )));
            }
        }

        let normed = rms_normalize_rows(hidden);
        let v_new = matmul(&normed, &w.wv)?;
        let (qk_new, keys_after) = if call.lazy {
            (None, None)
        } else {
            let q = matmul(&normed, &w.wq)?;
            let k = matmul(&normed, &w.wk)?;
            (Some(q), Some(k))
        };

        // Update the cache. Lazy layers store zero keys: nothing reads them.
        let k_rows = keys_after.unwrap_or_else(|| Matrix::zeros(v_new.rows(), v_new.cols()));
        match call.mode {
            Mode::Prefill => cache.fill(k_rows, v_new, rows.to_vec())?,
            Mode::Decode => cache.append(k_rows.row(0), v_new.row(0), rows[0])?,
        }

        let n_q = hidden.rows();
        let mut heads_out = Matrix::zeros(n_q, h * hd);
        let probs: Vec<Matrix> = if let Some(q) = qk_new {
            let mask = match call.mode {
                Mode::Prefill => Some(causal_mask(n_q)?),
                Mode::Decode => None,
            };
            let mut probs = Vec::with_capacity(h);
            for head in 0..h {
                let qh = q.columns(head * hd, hd);
                let kh = cache.keys.columns(head * hd, hd);
                let vh = cache.values.columns(head * hd, hd);
                let (out, a) = self_attention(&qh, &kh, &vh, mask.as_ref())?;
                heads_out.set_columns(head * hd, &out);
                probs.push(a);
            }
            reuse.push(probs.clone());
            probs
        } else {
            let cached = reuse.latest().ok_or_else(|| {
                Error::state(format!(
                    "lazy layer {} has no attention to inherit",
                    call.layer
                ))
            })?;
            if cached.len() != h || cached[0].rows() != n_q {
                return Err(Error::state(format!(
                    "inherited attention shape does not fit lazy layer {}",
                    call.layer
                )));
            }
            for (head, a) in cached.iter().enumerate() {
                let vh = cache.values.columns(head * hd, hd);
                let out = lazy_attention(a, &vh)?;
                heads_out.set_columns(head * hd, &out);
            }
            cached.to_vec()
        };

        let attn_out = matmul(&heads_out, &w.wo)?;
        let resid = hidden.add(&attn_out)?;
        let normed2 = rms_normalize_rows(&resid);
        let gate = matmul(&normed2, &w.w_gate)?.map(silu);
        let up = matmul(&normed2, &w.w_up)?;
        let mlp = matmul(&gate.hadamard(&up)?, &w.w_down)?;
        let out = resid.add(&mlp)?;

        let record = AttentionRecord::from_heads(call, &probs, &cache.rows);
        Ok((out, record))
    }
}
