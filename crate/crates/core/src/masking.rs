//! Foreground masks from CLS attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::PatchScoreMap;

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.05;
pub const BACKGROUND_WEIGHT: f32 = 0.5;
pub const FOREGROUND_WEIGHT: f32 = 1.0;

/// Per-patch multiplicative weights, each exactly 0.5 or 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMask {
    pub weights: Vec<f32>,
}

impl AttentionMask {
    pub fn all_foreground(n: usize) -> Self {
        Self { weights: vec![FOREGROUND_WEIGHT; n] }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Min-max normalizes an attention row and binarizes it at `threshold`.
pub fn attention_to_mask(attn_row: &[f32], threshold: f64) -> Result<AttentionMask> {
    if attn_row.len() < 2 {
        return Err(Error::EmptyInput("attention row needs at least two patches"));
    }
    if let Some(index) = attn_row.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { what: "attention", index });
    }
    let lo = attn_row.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = attn_row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi == lo {
        return Ok(AttentionMask::all_foreground(attn_row.len()));
    }
    let (lo, span) = (f64::from(lo), f64::from(hi) - f64::from(lo));
    let weights = attn_row
        .iter()
        .map(|&a| if (f64::from(a) - lo) / span >= threshold { FOREGROUND_WEIGHT } else { BACKGROUND_WEIGHT })
        .collect();
    Ok(AttentionMask { weights })
}

pub fn apply_mask(map: &PatchScoreMap, mask: &AttentionMask) -> Result<PatchScoreMap> {
    if map.scores.len() != mask.len() {
        return Err(Error::LengthMismatch { expected: map.scores.len(), got: mask.len() });
    }
    Ok(PatchScoreMap {
        scores: map.scores.iter().zip(&mask.weights).map(|(m, w)| m * w).collect(),
        grid: map.grid,
        query_name: map.query_name.clone(),
    })
}

/// Column-wise mean of `H x L` per-head CLS attention rows.
pub fn head_average(cls_rows: &[f32], n_heads: usize) -> Result<Vec<f32>> {
    if n_heads == 0 || cls_rows.is_empty() {
        return Err(Error::EmptyInput("no attention heads"));
    }
    if !cls_rows.len().is_multiple_of(n_heads) {
        return Err(Error::ShapeMismatch(format!("{} values do not split into {n_heads} heads", cls_rows.len())));
    }
    let l = cls_rows.len() / n_heads;
    let mut sums = vec![0.0f64; l];
    for row in cls_rows.chunks_exact(l) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += f64::from(v);
        }
    }
    Ok(sums.into_iter().map(|s| (s / n_heads as f64) as f32).collect())
}
