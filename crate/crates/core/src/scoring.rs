//! Cross-patch anomaly scoring.
//!
//! For a query patch `j` and reference image `i`:
//!
//! - `D[j,i,k] = 1 - <q_j, r_ik>` on unit vectors (cosine distance),
//! - `u[j,i]` reduces `D[j,i,.]` over the reference patches (min by default),
//! - `m_j` is the mean of `u[j,.]` over the `K_P` selected reference images,
//! - `S` is the mean of the `K_I` largest `m_j`.
//!
//! Few-shot scores each query against a prompt bank with `K_P = 1`. Batch
//! zero-shot scores each image against the other `B - 1` images with
//! `K_P = max(1, floor(kp_fraction * (B - 1)))`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{pair_extrema, Extremum, KernelKind, PackedImage};
use crate::store::{Grid, NormalizedBank, DEFAULT_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    FewShot,
    BatchZeroShot,
}

/// How `u[j,i]` reduces the distances from query patch `j` to the patches of reference `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Minimum distance, i.e. nearest-neighbour matching.
    #[default]
    Nearest,
    /// Maximum distance over the reference patches.
    Farthest,
}

impl Reduction {
    fn extremum(self) -> Extremum {
        match self {
            Reduction::Nearest => Extremum::MaxDot,
            Reduction::Farthest => Extremum::MinDot,
        }
    }
}

/// Which `K_P` reference images contribute to a patch score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSelection {
    #[default]
    LargestU,
    SmallestU,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub setting: Setting,
    pub per_image_reduction: Reduction,
    pub image_selection: ImageSelection,
    /// Fraction of reference images kept by `K_P` in batch zero-shot.
    pub kp_fraction: f64,
    /// Fraction of patches averaged into the image score. `None` keeps only
    /// the single highest patch score (`K_I = 1`).
    pub rho: Option<f64>,
    pub epsilon: f64,
}

impl ScoringConfig {
    pub fn new(setting: Setting) -> Self {
        Self {
            setting,
            per_image_reduction: Reduction::Nearest,
            image_selection: ImageSelection::LargestU,
            kp_fraction: 0.3,
            rho: None,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn few_shot() -> Self {
        Self::new(Setting::FewShot)
    }

    pub fn batch_zero_shot() -> Self {
        Self::new(Setting::BatchZeroShot)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kp_fraction > 0.0 && self.kp_fraction <= 1.0) {
            return Err(Error::Config(format!("kp_fraction {} must lie in (0, 1]", self.kp_fraction)));
        }
        if let Some(rho) = self.rho {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::Config(format!("rho {rho} must lie in (0, 1]")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Per-patch anomaly scores `m` of one query, in row-major grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchScoreMap {
    pub scores: Vec<f32>,
    pub grid: Grid,
    pub query_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub value: f64,
    pub contributing_patches: Vec<usize>,
    pub query_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub map: PatchScoreMap,
    pub score: ImageScore,
}

/// Per-image match values of one query: `L` rows (query patches) by `N`
/// columns (reference images), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix {
    pub values: Vec<f32>,
    pub n_patches: usize,
    pub n_refs: usize,
}

impl MatchMatrix {
    pub fn row(&self, j: usize) -> &[f32] {
        &self.values[j * self.n_refs..(j + 1) * self.n_refs]
    }
}

#[inline]
fn dot_to_distance(dot: f32) -> f32 {
    (1.0 - dot).clamp(0.0, 2.0)
}

/// Row-major `L_q x L_r` cosine distances between two sets of unit vectors.
/// Zero (degenerate) vectors yield exactly 1.0.
pub fn distance_matrix(query: &[f32], query_dim: usize, reference: &[f32], ref_dim: usize) -> Result<Vec<f32>> {
    if query_dim != ref_dim {
        return Err(Error::DimensionMismatch(format!("query D={query_dim}, reference D={ref_dim}")));
    }
    let d = query_dim;
    if d == 0 || !query.len().is_multiple_of(d) || !reference.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch("buffer length is not a multiple of D".into()));
    }
    let mut out = Vec::with_capacity((query.len() / d) * (reference.len() / d));
    for q in query.chunks_exact(d) {
        for r in reference.chunks_exact(d) {
            let dot: f32 = q.iter().zip(r).map(|(a, b)| a * b).sum();
            out.push(dot_to_distance(dot));
        }
    }
    Ok(out)
}

/// Reduces each row of a row-major `L_q x L_r` distance matrix.
pub fn per_image_match(dist: &[f32], n_ref_patches: usize, reduction: Reduction) -> Result<Vec<f32>> {
    if n_ref_patches == 0 {
        return Err(Error::EmptyReference);
    }
    if !dist.len().is_multiple_of(n_ref_patches) {
        return Err(Error::DimensionMismatch(format!(
            "{} distances do not split into rows of {n_ref_patches}",
            dist.len()
        )));
    }
    Ok(dist
        .chunks_exact(n_ref_patches)
        .map(|row| match reduction {
            Reduction::Nearest => row.iter().copied().fold(f32::INFINITY, f32::min),
            Reduction::Farthest => row.iter().copied().fold(f32::NEG_INFINITY, f32::max),
        })
        .collect())
}

/// `max(1, floor(fraction * n))`, capped at `n`. The slack keeps products such
/// as `0.29 * 100` from rounding down a whole step.
fn floor_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Number of reference images averaged into each patch score.
pub fn k_p(n_refs: usize, cfg: &ScoringConfig) -> usize {
    match cfg.setting {
        Setting::FewShot => 1,
        Setting::BatchZeroShot => floor_count(cfg.kp_fraction, n_refs),
    }
}

/// Number of patches averaged into the image score.
pub fn k_i(n_patches: usize, cfg: &ScoringConfig) -> usize {
    match cfg.rho {
        None => 1,
        Some(rho) => floor_count(rho, n_patches),
    }
}

/// Indices of the `k` largest (or smallest) values, ties broken by ascending
/// index, listed in selection order.
pub(crate) fn top_k_indices(values: &[f32], k: usize, largest: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let k = k.min(values.len());
    let cmp = |&a: &usize, &b: &usize| {
        let ord = if largest { values[b].total_cmp(&values[a]) } else { values[a].total_cmp(&values[b]) };
        ord.then(a.cmp(&b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Mean of the selected values, summed in selection order so equal multisets
/// give bit-identical means.
fn mean_of(values: &[f32], selected: &[usize]) -> f64 {
    selected.iter().map(|&i| f64::from(values[i])).sum::<f64>() / selected.len() as f64
}

/// Aggregates a match matrix into per-patch scores.
pub fn patch_scores(u: &MatchMatrix, grid: Grid, query_name: &str, cfg: &ScoringConfig) -> Result<PatchScoreMap> {
    if u.n_refs == 0 {
        return Err(Error::EmptyPromptBank);
    }
    if grid.len() != u.n_patches || u.values.len() != u.n_patches * u.n_refs {
        return Err(Error::GridMismatch(format!(
            "grid {}x{} for a {}x{} match matrix",
            grid.rows, grid.cols, u.n_patches, u.n_refs
        )));
    }
    let kp = k_p(u.n_refs, cfg);
    let largest = cfg.image_selection == ImageSelection::LargestU;
    let scores = (0..u.n_patches)
        .map(|j| {
            let row = u.row(j);
            let sel = top_k_indices(row, kp, largest);
            mean_of(row, &sel) as f32
        })
        .collect();
    Ok(PatchScoreMap { scores, grid, query_name: query_name.to_string() })
}

/// Image score from the `K_I` largest patch scores, optionally weighted by a mask first.
pub fn image_score(map: &PatchScoreMap, mask: Option<&[f32]>, cfg: &ScoringConfig) -> Result<ImageScore> {
    let l = map.scores.len();
    if l == 0 {
        return Err(Error::EmptyInput("patch score map"));
    }
    let weighted;
    let values: &[f32] = match mask {
        Some(w) => {
            if w.len() != l {
                return Err(Error::LengthMismatch { expected: l, got: w.len() });
            }
            weighted = map.scores.iter().zip(w).map(|(m, w)| m * w).collect::<Vec<_>>();
            &weighted
        }
        None => &map.scores,
    };
    let sel = top_k_indices(values, k_i(l, cfg), true);
    Ok(ImageScore { value: mean_of(values, &sel), contributing_patches: sel, query_name: map.query_name.clone() })
}

fn pack_bank(bank: &NormalizedBank) -> Vec<PackedImage> {
    (0..bank.n_images())
        .into_par_iter()
        .map(|i| PackedImage::new(bank.image(i), bank.n_patches(), bank.dim()))
        .collect()
}

fn assemble(per_ref: &[Vec<f32>], n_patches: usize) -> MatchMatrix {
    let n_refs = per_ref.len();
    let mut values = vec![0.0f32; n_patches * n_refs];
    for (i, col) in per_ref.iter().enumerate() {
        for (j, &dot) in col.iter().enumerate() {
            values[j * n_refs + i] = dot_to_distance(dot);
        }
    }
    MatchMatrix { values, n_patches, n_refs }
}

/// Match matrices of every query against the prompt bank, using `kind`.
pub fn few_shot_matches_with(
    kind: KernelKind,
    query: &NormalizedBank,
    prompt: &NormalizedBank,
    reduction: Reduction,
) -> Result<Vec<MatchMatrix>> {
    if query.dim() != prompt.dim() {
        return Err(Error::DimensionMismatch(format!("query bank D={}, prompt bank D={}", query.dim(), prompt.dim())));
    }
    if prompt.n_images() == 0 {
        return Err(Error::EmptyPromptBank);
    }
    if prompt.n_patches() == 0 {
        return Err(Error::EmptyReference);
    }
    let lq = query.n_patches();
    let np = prompt.n_images();
    let qs = pack_bank(query);
    let ps = pack_bank(prompt);
    let ext = reduction.extremum();
    let cols: Vec<Vec<f32>> = (0..query.n_images() * np)
        .into_par_iter()
        .map(|t| {
            let (q, p) = (t / np, t % np);
            let mut best = vec![0.0f32; lq];
            pair_extrema(kind, &qs[q], &ps[p], ext, &mut best, None);
            best
        })
        .collect();
    Ok(cols.chunks(np).map(|c| assemble(c, lq)).collect())
}

/// Leave-one-out match matrices for every image of a batch, using `kind`.
/// Column `i` of image `b`'s matrix refers to the `i`-th other image in batch order.
pub fn batch_matches_with(kind: KernelKind, batch: &NormalizedBank, reduction: Reduction) -> Result<Vec<MatchMatrix>> {
    let b = batch.n_images();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let l = batch.n_patches();
    if l == 0 {
        return Err(Error::EmptyReference);
    }
    let packed = pack_bank(batch);
    let ext = reduction.extremum();
    let pairs: Vec<(usize, usize)> = (0..b).flat_map(|x| (x + 1..b).map(move |y| (x, y))).collect();
    // Each unordered pair is computed once: rows give x-vs-y, columns give y-vs-x.
    let results: Vec<(Vec<f32>, Vec<f32>)> = pairs
        .par_iter()
        .map(|&(x, y)| {
            let mut rows = vec![0.0f32; l];
            let mut cols = vec![0.0f32; l];
            pair_extrema(kind, &packed[x], &packed[y], ext, &mut rows, Some(&mut cols));
            (rows, cols)
        })
        .collect();
    let mut per_query: Vec<Vec<Vec<f32>>> = (0..b).map(|_| vec![Vec::new(); b - 1]).collect();
    for (&(x, y), (rows, cols)) in pairs.iter().zip(results) {
        // y > x, so y sits at slot y-1 among x's references and x at slot x among y's.
        per_query[x][y - 1] = rows;
        per_query[y][x] = cols;
    }
    Ok(per_query.iter().map(|refs| assemble(refs, l)).collect())
}

fn finish(bank: &NormalizedBank, matches: Vec<MatchMatrix>, cfg: &ScoringConfig) -> Result<Vec<ScoredImage>> {
    let grid = bank.grid();
    matches
        .into_par_iter()
        .enumerate()
        .map(|(q, u)| {
            let map = patch_scores(&u, grid, bank.name(q), cfg)?;
            let score = image_score(&map, None, cfg)?;
            Ok(ScoredImage { map, score })
        })
        .collect()
}

/// Scores each query against a bank of normal prompt images.
pub fn score_few_shot(
    query: &NormalizedBank,
    prompt: &NormalizedBank,
    cfg: &ScoringConfig,
) -> Result<Vec<ScoredImage>> {
    score_few_shot_with(KernelKind::detect(), query, prompt, cfg)
}

pub fn score_few_shot_with(
    kind: KernelKind,
    query: &NormalizedBank,
    prompt: &NormalizedBank,
    cfg: &ScoringConfig,
) -> Result<Vec<ScoredImage>> {
    cfg.validate()?;
    let cfg = ScoringConfig { setting: Setting::FewShot, ..*cfg };
    let matches = few_shot_matches_with(kind, query, prompt, cfg.per_image_reduction)?;
    finish(query, matches, &cfg)
}

/// Scores every image of an unlabeled batch against the rest of the batch.
pub fn score_batch_zero_shot(batch: &NormalizedBank, cfg: &ScoringConfig) -> Result<Vec<ScoredImage>> {
    score_batch_zero_shot_with(KernelKind::detect(), batch, cfg)
}

pub fn score_batch_zero_shot_with(
    kind: KernelKind,
    batch: &NormalizedBank,
    cfg: &ScoringConfig,
) -> Result<Vec<ScoredImage>> {
    cfg.validate()?;
    let cfg = ScoringConfig { setting: Setting::BatchZeroShot, ..*cfg };
    let matches = batch_matches_with(kind, batch, cfg.per_image_reduction)?;
    finish(batch, matches, &cfg)
}
