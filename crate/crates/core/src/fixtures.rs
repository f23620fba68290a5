//! Seeded synthetic banks with planted anomalies, and a brute-force scorer
//! used as the reference for the fast engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{ImageScore, ImageSelection, PatchScoreMap, Reduction, ScoringConfig, Setting};
use crate::store::{PatchEmbeddingBank, StoreMetadata};

/// Pixel side of one synthetic patch.
pub const SYNTHETIC_PATCH_SIZE: u32 = 14;
/// Largest `N * L^2` the oracle accepts.
pub const ORACLE_SIZE_GUARD: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_images: usize,
    /// `(rows, cols)`.
    pub grid: (usize, usize),
    pub embed_dim: usize,
    pub anomaly_rate: f64,
    pub anomaly_patch_count: usize,
    /// Angle in radians between the normal cluster and each planted cluster.
    pub cluster_separation: f64,
    /// Typical angle in radians between a patch and its cluster center.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    0.05
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = self.grid;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_images == 0 || rows == 0 || cols == 0 {
            return bad("n_images and grid must be positive".into());
        }
        if self.embed_dim < 2 {
            return bad("embed_dim must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.anomaly_rate) {
            return bad(format!("anomaly_rate {} must lie in [0, 1)", self.anomaly_rate));
        }
        if self.anomaly_patch_count == 0 || self.anomaly_patch_count > rows * cols {
            return bad(format!("anomaly_patch_count {} must lie in 1..={}", self.anomaly_patch_count, rows * cols));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return bad("cluster_separation must be positive".into());
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad("jitter must be non-negative".into());
        }
        Ok(())
    }

    pub fn n_anomalous(&self) -> usize {
        (self.anomaly_rate * self.n_images as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFixture {
    pub bank: PatchEmbeddingBank,
    pub image_labels: Vec<bool>,
    /// Row-major per-patch labels, one vector per image.
    pub pixel_labels: Vec<Vec<bool>>,
}

/// Label file written next to a generated bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureLabels {
    pub image_names: Vec<String>,
    pub image_labels: Vec<u8>,
    pub pixel_labels: Vec<Vec<u8>>,
    pub grid: (usize, usize),
}

impl SyntheticFixture {
    pub fn labels(&self) -> FixtureLabels {
        FixtureLabels {
            image_names: self.bank.meta.image_names.clone(),
            image_labels: self.image_labels.iter().map(|&l| u8::from(l)).collect(),
            pixel_labels: self.pixel_labels.iter().map(|m| m.iter().map(|&l| u8::from(l)).collect()).collect(),
            grid: (self.bank.meta.grid.0 as usize, self.bank.meta.grid.1 as usize),
        }
    }
}

/// Counter-based generator: every draw is a pure function of its key.
#[derive(Debug, Clone, Copy)]
pub struct KeyedRng {
    seed: u64,
}

const STREAM_CENTER: u64 = u64::MAX;
const STREAM_CHOICE: u64 = u64::MAX - 1;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl KeyedRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn bits(&self, image: u64, patch: u64, dim: u64) -> u64 {
        mix(mix(mix(mix(self.seed) ^ image) ^ patch) ^ dim)
    }

    /// Uniform in `(0, 1)`.
    pub fn uniform(&self, image: u64, patch: u64, dim: u64) -> f64 {
        ((self.bits(image, patch, dim) >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Standard normal (Box-Muller over two keyed uniforms).
    pub fn normal(&self, image: u64, patch: u64, dim: u64) -> f64 {
        let u1 = self.uniform(image, patch, 2 * dim);
        let u2 = self.uniform(image, patch, 2 * dim + 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v {
        *x /= n;
    }
}

fn gaussian(rng: &KeyedRng, image: u64, patch: u64, dim: usize) -> Vec<f64> {
    (0..dim).map(|k| rng.normal(image, patch, k as u64)).collect()
}

/// Unit vector at `angle` from unit `mu`, toward a keyed random orthogonal direction.
fn at_angle(mu: &[f64], rng: &KeyedRng, image: u64, patch: u64, angle: f64) -> Vec<f64> {
    let mut nu = gaussian(rng, image, patch, mu.len());
    let proj: f64 = nu.iter().zip(mu).map(|(a, b)| a * b).sum();
    for (a, b) in nu.iter_mut().zip(mu) {
        *a -= proj * b;
    }
    unit(&mut nu);
    mu.iter().zip(&nu).map(|(m, n)| angle.cos() * m + angle.sin() * n).collect()
}

/// `(height, width)` of the near-square block that holds `count` cells filled row by row.
fn block_shape(count: usize, rows: usize, cols: usize) -> (usize, usize) {
    let side = (count as f64).sqrt().ceil() as usize;
    let w = side.max(count.div_ceil(rows)).min(cols).max(1);
    (count.div_ceil(w), w)
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticFixture> {
    generate(spec, spec.n_images, 0, "synthetic", spec.n_anomalous())
}

/// Normal-only companion bank for few-shot prompting.
///
/// Shares the normal cluster of `gen_synthetic(spec)` but draws its images from
/// a disjoint key range, so no training image duplicates a test image.
pub fn gen_synthetic_train(spec: &SyntheticSpec, n_train: usize) -> Result<PatchEmbeddingBank> {
    if n_train == 0 {
        return Err(Error::Config("n_train must be positive".into()));
    }
    Ok(generate(spec, n_train, TRAIN_KEY_BASE, "train", 0)?.bank)
}

const TRAIN_KEY_BASE: u64 = 1 << 40;

fn generate(
    spec: &SyntheticSpec,
    n: usize,
    key_base: u64,
    prefix: &str,
    n_anomalous: usize,
) -> Result<SyntheticFixture> {
    spec.validate()?;
    let rng = KeyedRng::new(spec.seed);
    let (rows, cols) = spec.grid;
    let (l, d) = (rows * cols, spec.embed_dim);
    let key = |i: usize| key_base + i as u64;

    let mut mu = gaussian(&rng, STREAM_CENTER, 0, d);
    unit(&mut mu);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (rng.bits(STREAM_CHOICE, key(i), 0), i));
    let mut image_labels = vec![false; n];
    for &i in order.iter().take(n_anomalous) {
        image_labels[i] = true;
    }

    let (bh, bw) = block_shape(spec.anomaly_patch_count, rows, cols);
    let jitter_scale = spec.jitter / (d as f64).sqrt();
    let mut embeddings = Vec::with_capacity(n * l * d);
    let mut pixel_labels = Vec::with_capacity(n);
    for (i, &anomalous) in image_labels.iter().enumerate() {
        let mut planted = vec![false; l];
        let mut center = None;
        if anomalous {
            let r0 = (rng.uniform(STREAM_CHOICE, key(i), 1) * (rows - bh + 1) as f64) as usize;
            let c0 = (rng.uniform(STREAM_CHOICE, key(i), 2) * (cols - bw + 1) as f64) as usize;
            for k in 0..spec.anomaly_patch_count {
                planted[(r0 + k / bw) * cols + c0 + k % bw] = true;
            }
            center = Some(at_angle(&mu, &rng, STREAM_CENTER, 1 + key(i), spec.cluster_separation));
        }
        for (j, &is_planted) in planted.iter().enumerate() {
            let c = if is_planted { center.as_deref().unwrap() } else { &mu };
            let noise = gaussian(&rng, key(i), j as u64, d);
            let mut v: Vec<f64> = c.iter().zip(&noise).map(|(a, z)| a + jitter_scale * z).collect();
            unit(&mut v);
            embeddings.extend(v.iter().map(|&x| x as f32));
        }
        pixel_labels.push(planted);
    }

    // Foreground: the central half of the grid in each axis.
    let (fr, fc) = (rows / 4..rows - rows / 4, cols / 4..cols - cols / 4);
    let mut attention = Vec::with_capacity(n * l);
    for i in 0..n {
        for j in 0..l {
            let u = rng.uniform(STREAM_CHOICE, key(i), 3 + j as u64) as f32;
            let fg = fr.contains(&(j / cols)) && fc.contains(&(j % cols));
            attention.push(if fg { 0.8 + 0.2 * u } else { 0.02 * u });
        }
    }

    let meta = StoreMetadata {
        backbone_id: "synthetic".into(),
        image_size: (cols as u32 * SYNTHETIC_PATCH_SIZE, rows as u32 * SYNTHETIC_PATCH_SIZE),
        patch_size: SYNTHETIC_PATCH_SIZE,
        grid: (rows as u32, cols as u32),
        embed_dim: d as u32,
        has_attention: true,
        image_names: (0..n).map(|i| format!("{prefix}_{i:04}")).collect(),
        dataset_tag: "synthetic".into(),
        created_unix_ms: 0,
    };
    let bank = PatchEmbeddingBank::new(meta, embeddings, Some(attention))?;
    Ok(SyntheticFixture { bank, image_labels, pixel_labels })
}

fn oracle_distance(a: &[f32], b: &[f32], epsilon: f64) -> f64 {
    let na = a.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    if na < epsilon || nb < epsilon {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

fn oracle_count(fraction: f64, n: usize) -> usize {
    let k = (fraction * n as f64 + 1e-9).floor() as usize;
    k.max(1).min(n)
}

/// Mean of the `k` extreme values; ties resolved toward lower index.
fn oracle_top_mean(values: &[f64], k: usize, largest: bool) -> (f64, Vec<usize>) {
    let mut ranked: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
    ranked.sort_by(|a, b| {
        let ord = if largest { b.0.partial_cmp(&a.0) } else { a.0.partial_cmp(&b.0) };
        ord.unwrap().then(a.1.cmp(&b.1))
    });
    let chosen = &ranked[..k];
    (chosen.iter().map(|c| c.0).sum::<f64>() / k as f64, chosen.iter().map(|c| c.1).collect())
}

/// Scores one query image against a list of reference images with explicit loops.
fn oracle_one(
    bank_q: &PatchEmbeddingBank,
    q: usize,
    refs: &[(&PatchEmbeddingBank, usize)],
    cfg: &ScoringConfig,
    setting: Setting,
) -> (PatchScoreMap, ImageScore) {
    let (lq, d) = (bank_q.n_patches(), bank_q.dim());
    let kp = match setting {
        Setting::FewShot => 1,
        Setting::BatchZeroShot => oracle_count(cfg.kp_fraction, refs.len()),
    };
    let mut scores = Vec::with_capacity(lq);
    for j in 0..lq {
        let x = &bank_q.image(q)[j * d..(j + 1) * d];
        let mut u = Vec::with_capacity(refs.len());
        for &(bank_r, r) in refs {
            let mut best: Option<f64> = None;
            for k in 0..bank_r.n_patches() {
                let y = &bank_r.image(r)[k * d..(k + 1) * d];
                let dist = oracle_distance(x, y, cfg.epsilon);
                best = Some(match (best, cfg.per_image_reduction) {
                    (None, _) => dist,
                    (Some(b), Reduction::Nearest) => b.min(dist),
                    (Some(b), Reduction::Farthest) => b.max(dist),
                });
            }
            u.push(best.unwrap());
        }
        let largest = cfg.image_selection == ImageSelection::LargestU;
        scores.push(oracle_top_mean(&u, kp, largest).0);
    }
    let ki = cfg.rho.map_or(1, |rho| oracle_count(rho, lq));
    let (value, contributing_patches) = oracle_top_mean(&scores, ki, true);
    let name = bank_q.meta.image_names[q].clone();
    let map = PatchScoreMap {
        scores: scores.iter().map(|&s| s as f32).collect(),
        grid: bank_q.meta.grid(),
        query_name: name.clone(),
    };
    (map, ImageScore { value, contributing_patches, query_name: name })
}

fn guard(n: usize, l: usize) -> Result<()> {
    let size = n as u64 * (l as u64).pow(2);
    if size > ORACLE_SIZE_GUARD {
        return Err(Error::SizeGuardExceeded(size));
    }
    Ok(())
}

/// Brute-force few-shot scoring on raw (unnormalized) banks.
pub fn oracle_score_few_shot(
    query: &PatchEmbeddingBank,
    prompt: &PatchEmbeddingBank,
    cfg: &ScoringConfig,
) -> Result<Vec<(PatchScoreMap, ImageScore)>> {
    guard(query.n_images() + prompt.n_images(), query.n_patches().max(prompt.n_patches()))?;
    if query.dim() != prompt.dim() {
        return Err(Error::DimensionMismatch(format!("query D={}, prompt D={}", query.dim(), prompt.dim())));
    }
    if prompt.n_images() == 0 {
        return Err(Error::EmptyPromptBank);
    }
    let refs: Vec<(&PatchEmbeddingBank, usize)> = (0..prompt.n_images()).map(|r| (prompt, r)).collect();
    Ok((0..query.n_images()).map(|q| oracle_one(query, q, &refs, cfg, Setting::FewShot)).collect())
}

/// Brute-force leave-one-out batch scoring on a raw bank.
pub fn oracle_score_batch(batch: &PatchEmbeddingBank, cfg: &ScoringConfig) -> Result<Vec<(PatchScoreMap, ImageScore)>> {
    guard(batch.n_images(), batch.n_patches())?;
    if batch.n_images() < 2 {
        return Err(Error::BatchTooSmall(batch.n_images()));
    }
    Ok((0..batch.n_images())
        .map(|q| {
            let refs: Vec<(&PatchEmbeddingBank, usize)> =
                (0..batch.n_images()).filter(|&r| r != q).map(|r| (batch, r)).collect();
            oracle_one(batch, q, &refs, cfg, Setting::BatchZeroShot)
        })
        .collect())
}
