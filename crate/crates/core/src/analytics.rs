//! Layer-pair similarity, visual attention share and lazy-layer detection
//! over recorded attention rows.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::AttentionRecord;

/// `a·b / (‖a‖‖b‖)`, or `None` when either norm is zero or the lengths
/// differ. Identical inputs give exactly 1.0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((ab / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// Cosine of two records' last rows restricted to the positions both
/// contain.
pub fn aligned_cosine(a: &AttentionRecord, b: &AttentionRecord) -> Option<f64> {
    if a.positions == b.positions {
        return cosine_similarity(&a.last_row, &b.last_row);
    }
    let index: HashMap<usize, usize> = b
        .positions
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i))
        .collect();
    let (mut va, mut vb) = (Vec::new(), Vec::new());
    for (i, p) in a.positions.iter().enumerate() {
        if let Some(&j) = index.get(p) {
            va.push(a.last_row[i]);
            vb.push(b.last_row[j]);
        }
    }
    cosine_similarity(&va, &vb)
}

/// Symmetric all-pairs layer similarity for one step. Entries are `None`
/// where the similarity is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub size: usize,
    pub values: Vec<Option<f64>>,
    /// How rows of different lengths were compared.
    pub alignment: String,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.size + j]
    }
}

/// `records` must hold one record per layer, ordered by layer.
pub fn similarity_matrix(records: &[&AttentionRecord]) -> SimilarityMatrix {
    let n = records.len();
    let mut values = vec![None; n * n];
    for i in 0..n {
        for j in i..n {
            let c = aligned_cosine(records[i], records[j]);
            values[i * n + j] = c;
            values[j * n + i] = c;
        }
    }
    SimilarityMatrix {
        size: n,
        values,
        alignment: "position_intersection".to_string(),
    }
}

/// Fraction of the last row's attention mass on visual tokens.
pub fn visual_share(record: &AttentionRecord) -> f64 {
    let total: f64 = record.last_row.iter().sum();
    if total <= 0.0 || record.visual_slice.is_empty() {
        return 0.0;
    }
    (record.visual_slice.iter().sum::<f64>() / total).clamp(0.0, 1.0)
}

/// Layers `l ≥ 1` whose similarity to layer `l - 1` reaches `threshold`.
pub fn lazy_candidates(matrix: &SimilarityMatrix, threshold: f64) -> Vec<usize> {
    (1..matrix.size)
        .filter(|&l| matrix.get(l, l - 1).is_some_and(|c| c >= threshold))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(layer: usize, positions: Vec<usize>, row: Vec<f64>, visual: &[usize]) -> AttentionRecord {
        let mut vp = Vec::new();
        let mut vs = Vec::new();
        for (p, a) in positions.iter().zip(&row) {
            if visual.contains(p) {
                vp.push(*p);
                vs.push(*a);
            }
        }
        AttentionRecord {
            layer,
            step: 0,
            positions,
            last_row: row,
            visual_positions: vp,
            visual_slice: vs,
        }
    }

    #[test]
    fn cosine_basics() {
        let a = [0.3, 0.2, 0.5];
        assert_eq!(cosine_similarity(&a, &a), Some(1.0));
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), Some(0.0));
        let c = cosine_similarity(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), None);
    }

    #[test]
    fn shared_record_gives_all_ones() {
        let r = rec(0, vec![0, 1, 2], vec![0.2, 0.3, 0.5], &[1]);
        let m = similarity_matrix(&[&r, &r, &r]);
        assert!(m.values.iter().all(|v| *v == Some(1.0)));
        assert_eq!(lazy_candidates(&m, 1.0), vec![1, 2]);
    }

    #[test]
    fn decaying_fixture_is_banded() {
        // unit vectors rotating by a fixed angle per layer
        let theta = 0.15;
        let recs: Vec<AttentionRecord> = (0..8)
            .map(|l| {
                let a = theta * l as f64;
                rec(l, vec![0, 1], vec![a.cos(), a.sin()], &[])
            })
            .collect();
        let refs: Vec<&AttentionRecord> = recs.iter().collect();
        let m = similarity_matrix(&refs);
        for i in 0..8 {
            assert!((m.get(i, i).unwrap() - 1.0).abs() < 1e-9);
            for j in 0..8 {
                assert_eq!(m.get(i, j), m.get(j, i));
                if j + 1 < 8 && j >= i {
                    assert!(m.get(i, j + 1).unwrap() < m.get(i, j).unwrap());
                }
            }
        }
        assert!(lazy_candidates(&m, 0.999).is_empty());
        assert_eq!(lazy_candidates(&m, 0.0), (1..8).collect::<Vec<_>>());
    }

    #[test]
    fn intersection_alignment() {
        let a = rec(0, vec![0, 1, 2, 3], vec![0.1, 0.2, 0.3, 0.4], &[1, 2]);
        let b = rec(1, vec![0, 2, 3], vec![0.1, 0.3, 0.4], &[2]);
        assert_eq!(aligned_cosine(&a, &b), cosine_similarity(&[0.1, 0.3, 0.4], &[0.1, 0.3, 0.4]));
    }

    #[test]
    fn share_values() {
        let u = rec(0, vec![0, 1, 2, 3], vec![0.25; 4], &[1, 2]);
        assert_eq!(visual_share(&u), 0.5);
        let z = rec(0, vec![0, 1, 2], vec![0.5, 0.0, 0.5], &[1]);
        assert_eq!(visual_share(&z), 0.0);
        let none = rec(0, vec![0, 1], vec![0.5, 0.5], &[]);
        assert_eq!(visual_share(&none), 0.0);
        assert!(visual_share(&none).is_sign_positive());
    }
}
