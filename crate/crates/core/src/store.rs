//! The PEAD v1 container for patch embeddings and CLS attention rows.
//!
//! Layout (all integers and floats little-endian, no padding, no trailer):
//!
//! ```text
//! "PEAD" | version: u32 = 1 | metadata_len: u32 | metadata JSON (metadata_len bytes)
//!        | embeddings f32 [image][patch][dim]
//!        | attention  f32 [image][patch]        (only when has_attention)
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PEAD";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;

/// Patch grid geometry, `rows x cols` patches in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMetadata {
    pub backbone_id: String,
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
    pub patch_size: u32,
    /// `(rows, cols)`.
    pub grid: (u32, u32),
    pub embed_dim: u32,
    pub has_attention: bool,
    pub image_names: Vec<String>,
    pub dataset_tag: String,
    pub created_unix_ms: i64,
}

impl StoreMetadata {
    pub fn grid(&self) -> Grid {
        Grid::new(self.grid.0 as usize, self.grid.1 as usize)
    }

    pub fn n_images(&self) -> usize {
        self.image_names.len()
    }

    pub fn n_patches(&self) -> usize {
        self.grid().len()
    }

    pub fn dim(&self) -> usize {
        self.embed_dim as usize
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image_size;
        let (rows, cols) = self.grid;
        if self.patch_size == 0 || self.embed_dim == 0 || rows == 0 || cols == 0 {
            return Err(Error::InvariantViolation("patch_size, embed_dim and grid dimensions must be positive".into()));
        }
        if h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::InvariantViolation(format!(
                "image size {w}x{h} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        if h / self.patch_size != rows || w / self.patch_size != cols {
            return Err(Error::InvariantViolation(format!(
                "grid {rows}x{cols} does not match image size {w}x{h} / patch {}",
                self.patch_size
            )));
        }
        let mut seen = HashSet::with_capacity(self.image_names.len());
        for name in &self.image_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvariantViolation(format!("duplicate image name {name:?}")));
            }
        }
        Ok(())
    }

    /// Number of tensor bytes that follow the metadata block.
    pub fn payload_len(&self) -> u64 {
        let n = self.n_images() as u64;
        let l = self.n_patches() as u64;
        let d = self.embed_dim as u64;
        let attn = if self.has_attention { n * l * 4 } else { 0 };
        n * l * d * 4 + attn
    }
}

/// `N x L x D` patch embeddings plus optional `N x L` head-averaged CLS attention.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddingBank {
    pub meta: StoreMetadata,
    pub embeddings: Vec<f32>,
    pub attention: Option<Vec<f32>>,
}

impl PatchEmbeddingBank {
    /// Builds a bank and checks every type invariant. `meta.has_attention` is
    /// overwritten to reflect whether `attention` is present.
    pub fn new(mut meta: StoreMetadata, embeddings: Vec<f32>, attention: Option<Vec<f32>>) -> Result<Self> {
        meta.has_attention = attention.is_some();
        let bank = Self { meta, embeddings, attention };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        let n = self.meta.n_images();
        let l = self.meta.n_patches();
        let d = self.meta.dim();
        if self.embeddings.len() != n * l * d {
            return Err(Error::InvariantViolation(format!(
                "embeddings hold {} floats, expected {n}x{l}x{d}",
                self.embeddings.len()
            )));
        }
        check_finite("embeddings", &self.embeddings)?;
        match (&self.attention, self.meta.has_attention) {
            (Some(a), true) => {
                if a.len() != n * l {
                    return Err(Error::InvariantViolation(format!(
                        "attention holds {} floats, expected {n}x{l}",
                        a.len()
                    )));
                }
                check_finite("attention", a)?;
            }
            (None, false) => {}
            _ => return Err(Error::InvariantViolation("has_attention flag disagrees with the attention block".into())),
        }
        Ok(())
    }

    pub fn n_images(&self) -> usize {
        self.meta.n_images()
    }

    pub fn n_patches(&self) -> usize {
        self.meta.n_patches()
    }

    pub fn dim(&self) -> usize {
        self.meta.dim()
    }

    /// `L x D` row-major embeddings of image `i`.
    pub fn image(&self, i: usize) -> &[f32] {
        let stride = self.n_patches() * self.dim();
        &self.embeddings[i * stride..(i + 1) * stride]
    }

    pub fn attention_row(&self, i: usize) -> Option<&[f32]> {
        let l = self.n_patches();
        self.attention.as_ref().map(|a| &a[i * l..(i + 1) * l])
    }

    /// New bank containing the listed images, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let stride = self.n_patches() * self.dim();
        let l = self.n_patches();
        let mut embeddings = Vec::with_capacity(indices.len() * stride);
        let mut attention = self.attention.as_ref().map(|_| Vec::with_capacity(indices.len() * l));
        let mut names = Vec::with_capacity(indices.len());
        for &i in indices {
            embeddings.extend_from_slice(self.image(i));
            if let (Some(dst), Some(src)) = (attention.as_mut(), self.attention_row(i)) {
                dst.extend_from_slice(src);
            }
            names.push(self.meta.image_names[i].clone());
        }
        let mut meta = self.meta.clone();
        meta.image_names = names;
        Self { meta, embeddings, attention }
    }

    /// Serializes to the PEAD v1 byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let json = serde_json::to_vec(&self.meta)?;
        let meta_len =
            u32::try_from(json.len()).map_err(|_| Error::InvariantViolation("metadata exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + self.meta.payload_len() as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.embeddings {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(attn) = &self.attention {
            for v in attn {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let found = bytes.len() as u64;
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(Error::BadMagic { found: bytes[..4].try_into().unwrap() });
            }
            return Err(Error::TruncatedFile { expected: HEADER_LEN as u64, found });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta_end = HEADER_LEN + meta_len;
        if bytes.len() < meta_end {
            return Err(Error::TruncatedFile { expected: meta_end as u64, found });
        }
        let meta: StoreMetadata = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
            .map_err(|e| Error::MetadataMismatch(format!("unparseable metadata: {e}")))?;
        meta.validate().map_err(|e| Error::MetadataMismatch(e.to_string()))?;

        let expected = meta_end as u64 + meta.payload_len();
        if found < expected {
            return Err(Error::TruncatedFile { expected, found });
        }
        if found > expected {
            return Err(Error::MetadataMismatch(format!(
                "declared shape accounts for {expected} bytes but file has {found}"
            )));
        }

        let n_emb = meta.n_images() * meta.n_patches() * meta.dim();
        let emb_end = meta_end + n_emb * 4;
        let embeddings = decode_f32(&bytes[meta_end..emb_end]);
        check_finite("embeddings", &embeddings)?;
        let attention = if meta.has_attention {
            let attn = decode_f32(&bytes[emb_end..]);
            check_finite("attention", &attn)?;
            Some(attn)
        } else {
            None
        };
        Ok(Self { meta, embeddings, attention })
    }
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

fn check_finite(what: &'static str, values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFiniteValue { what, index }),
        None => Ok(()),
    }
}

/// Writes `bank` to `path` in PEAD v1 format. Malformed banks are refused.
pub fn write_bank(bank: &PatchEmbeddingBank, path: impl AsRef<Path>) -> Result<()> {
    let bytes = bank.to_bytes()?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<PatchEmbeddingBank> {
    let bytes = fs::read(path)?;
    PatchEmbeddingBank::from_bytes(&bytes)
}

/// A bank whose patch vectors have unit L2 norm. Vectors whose input norm is
/// below epsilon are flagged degenerate and stored as zero vectors, so every
/// dot product involving them is exactly 0 and the cosine distance exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedBank {
    pub meta: StoreMetadata,
    pub vectors: Vec<f32>,
    pub degenerate: Vec<bool>,
    pub attention: Option<Vec<f32>>,
}

impl NormalizedBank {
    pub fn n_images(&self) -> usize {
        self.meta.n_images()
    }

    pub fn n_patches(&self) -> usize {
        self.meta.n_patches()
    }

    pub fn dim(&self) -> usize {
        self.meta.dim()
    }

    pub fn grid(&self) -> Grid {
        self.meta.grid()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let stride = self.n_patches() * self.dim();
        &self.vectors[i * stride..(i + 1) * stride]
    }

    pub fn degenerate_flags(&self, i: usize) -> &[bool] {
        let l = self.n_patches();
        &self.degenerate[i * l..(i + 1) * l]
    }

    pub fn attention_row(&self, i: usize) -> Option<&[f32]> {
        let l = self.n_patches();
        self.attention.as_ref().map(|a| &a[i * l..(i + 1) * l])
    }

    pub fn name(&self, i: usize) -> &str {
        &self.meta.image_names[i]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let l = self.n_patches();
        let stride = l * self.dim();
        let mut vectors = Vec::with_capacity(indices.len() * stride);
        let mut degenerate = Vec::with_capacity(indices.len() * l);
        let mut attention = self.attention.as_ref().map(|_| Vec::with_capacity(indices.len() * l));
        let mut names = Vec::with_capacity(indices.len());
        for &i in indices {
            vectors.extend_from_slice(self.image(i));
            degenerate.extend_from_slice(self.degenerate_flags(i));
            if let (Some(dst), Some(src)) = (attention.as_mut(), self.attention_row(i)) {
                dst.extend_from_slice(src);
            }
            names.push(self.meta.image_names[i].clone());
        }
        let mut meta = self.meta.clone();
        meta.image_names = names;
        Self { meta, vectors, degenerate, attention }
    }

    /// Stacks banks with identical grid and dimension; metadata comes from the first.
    pub fn concat(parts: &[&NormalizedBank]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyInput("no banks to concatenate"))?;
        let mut out = NormalizedBank {
            meta: first.meta.clone(),
            vectors: Vec::new(),
            degenerate: Vec::new(),
            attention: first.attention.as_ref().map(|_| Vec::new()),
        };
        out.meta.image_names.clear();
        for p in parts {
            if p.grid() != first.grid() || p.dim() != first.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "cannot stack {}x{}x{} onto {}x{}x{}",
                    p.grid().rows,
                    p.grid().cols,
                    p.dim(),
                    first.grid().rows,
                    first.grid().cols,
                    first.dim()
                )));
            }
            out.vectors.extend_from_slice(&p.vectors);
            out.degenerate.extend_from_slice(&p.degenerate);
            out.meta.image_names.extend(p.meta.image_names.iter().cloned());
            out.attention = match (out.attention.take(), &p.attention) {
                (Some(mut a), Some(b)) => {
                    a.extend_from_slice(b);
                    Some(a)
                }
                _ => None,
            };
        }
        out.meta.has_attention = out.attention.is_some();
        Ok(out)
    }
}

pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Scales every patch vector to unit L2 norm.
pub fn normalize_bank(bank: &PatchEmbeddingBank, epsilon: f64) -> NormalizedBank {
    let d = bank.dim();
    let mut vectors = Vec::with_capacity(bank.embeddings.len());
    let mut degenerate = Vec::with_capacity(bank.embeddings.len() / d.max(1));
    for v in bank.embeddings.chunks_exact(d) {
        let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if norm < epsilon {
            degenerate.push(true);
            vectors.extend(std::iter::repeat_n(0.0f32, d));
        } else {
            degenerate.push(false);
            vectors.extend(v.iter().map(|&x| (f64::from(x) / norm) as f32));
        }
    }
    NormalizedBank { meta: bank.meta.clone(), vectors, degenerate, attention: bank.attention.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn meta(n: usize, rows: u32, cols: u32, dim: u32) -> StoreMetadata {
        StoreMetadata {
            backbone_id: "test".into(),
            image_size: (cols * 2, rows * 2),
            patch_size: 2,
            grid: (rows, cols),
            embed_dim: dim,
            has_attention: false,
            image_names: (0..n).map(|i| format!("img{i}")).collect(),
            dataset_tag: "unit".into(),
            created_unix_ms: 0,
        }
    }

    fn lcg_bank(seed: u64, n: usize, rows: u32, cols: u32, dim: u32, attention: bool) -> PatchEmbeddingBank {
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        };
        let l = (rows * cols) as usize;
        let emb: Vec<f32> = (0..n * l * dim as usize).map(|_| next()).collect();
        let attn = attention.then(|| (0..n * l).map(|_| next().abs()).collect());
        PatchEmbeddingBank::new(meta(n, rows, cols, dim), emb, attn).unwrap()
    }

    #[test]
    fn concat_matches_select() {
        let nb = normalize_bank(&lcg_bank(5, 5, 2, 3, 4, true), DEFAULT_EPSILON);
        let joined = NormalizedBank::concat(&[&nb.select(&[0, 2]), &nb.select(&[4])]).unwrap();
        assert_eq!(joined, nb.select(&[0, 2, 4]));
        let other = normalize_bank(&lcg_bank(5, 1, 3, 2, 4, true), DEFAULT_EPSILON);
        assert!(NormalizedBank::concat(&[&nb, &other]).is_err());
        assert!(NormalizedBank::concat(&[]).is_err());
    }

    fn meta_len(bank: &PatchEmbeddingBank) -> usize {
        serde_json::to_vec(&bank.meta).unwrap().len()
    }

    #[test]
    fn file_size_without_attention() {
        let bank = lcg_bank(1, 1, 2, 2, 2, false);
        let bytes = bank.to_bytes().unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + meta_len(&bank) + 32);
    }

    #[test]
    fn file_size_with_attention() {
        let bank = lcg_bank(2, 2, 2, 2, 2, true);
        let bytes = bank.to_bytes().unwrap();
        assert_eq!(bytes.len(), 12 + meta_len(&bank) + 64 + 32);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bank = lcg_bank(7, 3, 3, 3, 5, true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pead");
        write_bank(&bank, &path).unwrap();
        let raw = fs::read(&path).unwrap();
        // Independent decode of the tensor block straight from the file bytes.
        let off = 12 + meta_len(&bank);
        for (i, v) in bank.embeddings.iter().enumerate() {
            assert_eq!(&raw[off + 4 * i..off + 4 * i + 4], &v.to_bits().to_le_bytes());
        }
        let back = read_bank(&path).unwrap();
        assert_eq!(back.meta, bank.meta);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.embeddings), bits(&bank.embeddings));
        assert_eq!(bits(back.attention.as_ref().unwrap()), bits(bank.attention.as_ref().unwrap()));
        assert_eq!(back.to_bytes().unwrap(), raw);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = lcg_bank(1, 1, 2, 2, 2, false).to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XEAD");
        assert!(matches!(PatchEmbeddingBank::from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let mut bytes = lcg_bank(1, 1, 2, 2, 2, false).to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(PatchEmbeddingBank::from_bytes(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn truncation_mid_tensor_is_detected() {
        let bytes = lcg_bank(3, 2, 2, 2, 4, false).to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(PatchEmbeddingBank::from_bytes(cut), Err(Error::TruncatedFile { .. })));
        assert!(matches!(PatchEmbeddingBank::from_bytes(&bytes[..6]), Err(Error::TruncatedFile { .. })));
    }

    #[test]
    fn trailing_bytes_are_a_metadata_mismatch() {
        let mut bytes = lcg_bank(3, 2, 2, 2, 4, false).to_bytes().unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(PatchEmbeddingBank::from_bytes(&bytes), Err(Error::MetadataMismatch(_))));
    }

    #[test]
    fn non_finite_values_are_rejected_on_read() {
        let bank = lcg_bank(3, 1, 2, 2, 2, false);
        let mut bytes = bank.to_bytes().unwrap();
        let off = 12 + meta_len(&bank) + 8;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            PatchEmbeddingBank::from_bytes(&bytes),
            Err(Error::NonFiniteValue { what: "embeddings", index: 2 })
        ));
    }

    #[test]
    fn malformed_banks_are_refused() {
        let mut bank = lcg_bank(3, 1, 2, 2, 2, false);
        bank.embeddings[0] = f32::INFINITY;
        assert!(bank.to_bytes().is_err());

        let mut m = meta(2, 2, 2, 2);
        m.image_names = vec!["a".into(), "a".into()];
        assert!(PatchEmbeddingBank::new(m, vec![0.0; 16], None).is_err());

        let mut m = meta(1, 2, 2, 2);
        m.image_size = (5, 4);
        assert!(PatchEmbeddingBank::new(m, vec![0.0; 8], None).is_err());
    }

    #[test]
    fn unknown_metadata_keys_are_ignored() {
        let bank = lcg_bank(5, 1, 2, 2, 2, false);
        let mut value = serde_json::to_value(&bank.meta).unwrap();
        value["transforms"] = serde_json::json!([[0.0, 1.0, 2.0]]);
        let json = serde_json::to_vec(&value).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PEAD");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        for v in &bank.embeddings {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(PatchEmbeddingBank::from_bytes(&bytes).unwrap(), bank);
    }

    #[test]
    fn metadata_json_uses_field_names() {
        let json = serde_json::to_value(meta(1, 2, 3, 4)).unwrap();
        let keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        for k in [
            "backbone_id",
            "image_size",
            "patch_size",
            "grid",
            "embed_dim",
            "has_attention",
            "image_names",
            "dataset_tag",
            "created_unix_ms",
        ] {
            assert!(keys.contains(&k.to_string()), "missing {k}");
        }
        assert_eq!(json["grid"], serde_json::json!([2, 3]));
    }

    #[test]
    fn normalize_three_four() {
        let bank = PatchEmbeddingBank::new(meta(1, 1, 1, 2), vec![3.0, 4.0], None).unwrap();
        let nb = normalize_bank(&bank, DEFAULT_EPSILON);
        assert!((nb.vectors[0] - 0.6).abs() < 1e-7);
        assert!((nb.vectors[1] - 0.8).abs() < 1e-7);
        assert!(!nb.degenerate[0]);
    }

    #[test]
    fn zero_vector_is_flagged_degenerate() {
        let bank = PatchEmbeddingBank::new(meta(1, 1, 2, 2), vec![0.0, 0.0, 1.0, 0.0], None).unwrap();
        let nb = normalize_bank(&bank, 1e-12);
        assert_eq!(nb.degenerate, vec![true, false]);
        assert_eq!(&nb.vectors[..2], &[0.0, 0.0]);
    }

    #[test]
    fn random_bank_norms_are_unit() {
        let bank = lcg_bank(19, 4, 3, 4, 17, false);
        let nb = normalize_bank(&bank, DEFAULT_EPSILON);
        for v in nb.vectors.chunks_exact(17) {
            let n: f64 = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let bank = lcg_bank(23, 2, 3, 3, 9, false);
        let once = normalize_bank(&bank, DEFAULT_EPSILON);
        let as_raw = PatchEmbeddingBank::new(bank.meta.clone(), once.vectors.clone(), None).unwrap();
        let twice = normalize_bank(&as_raw, DEFAULT_EPSILON);
        for (a, b) in once.vectors.iter().zip(&twice.vectors) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn select_reorders_images() {
        let bank = lcg_bank(29, 3, 2, 2, 3, true);
        let sub = bank.select(&[2, 0]);
        assert_eq!(sub.image(0), bank.image(2));
        assert_eq!(sub.image(1), bank.image(0));
        assert_eq!(sub.attention_row(1), bank.attention_row(0));
        assert_eq!(sub.meta.image_names, vec!["img2", "img0"]);
        sub.validate().unwrap();
    }

    proptest::proptest! {
        #[test]
        fn write_read_is_identity(seed in 0u64..1000, n in 0usize..4, rows in 1u32..5, cols in 1u32..5, dim in 1u32..9, attention in proptest::bool::ANY) {
            let bank = lcg_bank(seed, n, rows, cols, dim, attention);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("b.pead");
            write_bank(&bank, &path).unwrap();
            let meta_len = serde_json::to_vec(&bank.meta).unwrap().len() as u64;
            let l = u64::from(rows * cols);
            let expected = 12 + meta_len + 4 * n as u64 * l * (u64::from(dim) + u64::from(attention));
            proptest::prop_assert_eq!(std::fs::metadata(&path).unwrap().len(), expected);
            let back = read_bank(&path).unwrap();
            proptest::prop_assert_eq!(back.to_bytes().unwrap(), bank.to_bytes().unwrap());
            proptest::prop_assert_eq!(back, bank);
        }
    }
}
