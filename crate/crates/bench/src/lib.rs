//! Inputs shared by the benchmarks in `benches/`.

use patchscore::fixtures::KeyedRng;
use patchscore::store::{PatchEmbeddingBank, StoreMetadata};

/// Bank of uniform random patch vectors in `[-0.5, 0.5)`.
pub fn random_bank(seed: u64, n: usize, rows: usize, cols: usize, dim: usize) -> PatchEmbeddingBank {
    let rng = KeyedRng::new(seed);
    let embeddings = (0..n * rows * cols * dim).map(|k| (rng.uniform(0, 0, k as u64) - 0.5) as f32).collect();
    let meta = StoreMetadata {
        backbone_id: "bench".into(),
        image_size: (cols as u32 * 14, rows as u32 * 14),
        patch_size: 14,
        grid: (rows as u32, cols as u32),
        embed_dim: dim as u32,
        has_attention: false,
        image_names: (0..n).map(|i| format!("bench_{i:04}")).collect(),
        dataset_tag: "bench".into(),
        created_unix_ms: 0,
    };
    PatchEmbeddingBank::new(meta, embeddings, None).expect("consistent shapes")
}
