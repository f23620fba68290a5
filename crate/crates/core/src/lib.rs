//! Training-free anomaly detection by patch-to-patch cosine matching.
//!
//! Query images are scored against a few normal prompt images (few-shot) or
//! against the other images of an unlabeled batch (batch zero-shot). Patch
//! embeddings come from a [`PatchEmbeddingBank`] stored in the PEAD format.

pub mod alignment;
pub mod anomaly_map;
pub mod dataset;
pub mod error;
pub mod fixtures;
pub mod kernel;
pub mod masking;
pub mod metrics;
pub mod scoring;
pub mod store;

pub use alignment::{average_variant_scores, build_prompt_variants, estimate_rigid, warp, GrayImage, RigidTransform};
pub use anomaly_map::{render_heatmap, to_pixel_map, BinaryMask, Normalization, PixelAnomalyMap};
pub use error::{Error, Result};
pub use fixtures::{gen_synthetic, gen_synthetic_train, SyntheticFixture, SyntheticSpec};
pub use kernel::KernelKind;
pub use masking::{apply_mask, attention_to_mask, AttentionMask};
pub use metrics::{aupro, auroc, average_precision, pixel_auroc, CategoryMetrics, EvalReport, MacroAverage};
pub use scoring::{
    image_score, k_i, k_p, patch_scores, score_batch_zero_shot, score_few_shot, ImageScore, ImageSelection,
    PatchScoreMap, Reduction, ScoredImage, ScoringConfig, Setting,
};
pub use store::{normalize_bank, read_bank, write_bank, Grid, NormalizedBank, PatchEmbeddingBank, StoreMetadata};
