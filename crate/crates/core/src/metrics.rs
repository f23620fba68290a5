//! Image-level AUROC / AP and pixel-level AUROC / AUPRO.

use serde::{Deserialize, Serialize};

use crate::anomaly_map::{BinaryMask, PixelAnomalyMap};
use crate::error::{Error, Result};

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
pub const DEFAULT_PRO_THRESHOLDS: usize = 200;

/// Mann-Whitney AUROC: `P(pos > neg) + 0.5 P(pos == neg)`.
pub fn auroc<T: Copy + Into<f64>>(scores: &[T], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch { expected: scores.len(), got: labels.len() });
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            pos.push(s.into());
        } else {
            neg.push(s.into());
        }
    }
    auroc_split(pos, neg)
}

/// AUROC from already separated positive and negative scores.
pub fn auroc_split(mut pos: Vec<f64>, mut neg: Vec<f64>) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass);
    }
    pos.sort_unstable_by(f64::total_cmp);
    neg.sort_unstable_by(f64::total_cmp);
    // For each block of equal positive scores count negatives strictly below and equal.
    let (mut below, mut wins) = (0usize, 0.0f64);
    let mut i = 0;
    while i < pos.len() {
        let v = pos[i];
        let mut j = i;
        while j < pos.len() && pos[j] == v {
            j += 1;
        }
        while below < neg.len() && neg[below] < v {
            below += 1;
        }
        let mut equal_end = below;
        while equal_end < neg.len() && neg[equal_end] == v {
            equal_end += 1;
        }
        wins += (j - i) as f64 * (below as f64 + 0.5 * (equal_end - below) as f64);
        i = j;
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}

/// Average precision over descending score thresholds, equal scores entering as one block.
pub fn average_precision<T: Copy + Into<f64>>(scores: &[T], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch { expected: scores.len(), got: labels.len() });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<(f64, bool)> = scores.iter().zip(labels).map(|(&s, &l)| (s.into(), l)).collect();
    order.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0usize, 0usize, 0.0f64, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        let v = order[i].0;
        while i < order.len() && order[i].0 == v {
            if order[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Pixel-level AUROC over every pixel of every map.
pub fn pixel_auroc(maps: &[PixelAnomalyMap], masks: &[BinaryMask]) -> Result<f64> {
    check_shapes(maps, masks)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (m, g) in maps.iter().zip(masks) {
        for (&v, &l) in m.values.iter().zip(&g.data) {
            if l != 0 {
                pos.push(f64::from(v));
            } else {
                neg.push(f64::from(v));
            }
        }
    }
    auroc_split(pos, neg)
}

fn check_shapes(maps: &[PixelAnomalyMap], masks: &[BinaryMask]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!("{} maps for {} masks", maps.len(), masks.len())));
    }
    for (m, g) in maps.iter().zip(masks) {
        if m.width != g.width || m.height != g.height {
            return Err(Error::ShapeMismatch(format!(
                "map {} is {}x{}, mask is {}x{}",
                m.source_query, m.width, m.height, g.width, g.height
            )));
        }
    }
    Ok(())
}

/// 8-connected component labels of a mask: 0 for background, 1..=n for regions.
pub fn connected_components(mask: &BinaryMask) -> (Vec<u32>, usize) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data[q] != 0 && labels[q] == 0 {
                        labels[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// One point of the PRO curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProPoint {
    pub fpr: f64,
    pub pro: f64,
}

/// `n` thresholds taken at evenly spaced quantile levels of all map values,
/// deduplicated and sorted descending.
pub fn quantile_thresholds(maps: &[PixelAnomalyMap], n: usize) -> Vec<f32> {
    let mut all: Vec<f32> = maps.iter().flat_map(|m| m.values.iter().copied()).collect();
    if all.is_empty() || n == 0 {
        return Vec::new();
    }
    all.sort_unstable_by(f32::total_cmp);
    let last = all.len() - 1;
    let mut out: Vec<f32> = if n == 1 {
        vec![all[0]]
    } else {
        (0..n).map(|i| all[((i as f64 * last as f64) / (n - 1) as f64).round() as usize]).collect()
    };
    out.sort_unstable_by(|a, b| b.total_cmp(a));
    out.dedup();
    out
}

/// PRO curve at the given descending thresholds (a pixel is predicted
/// anomalous when its value is `>= t`), prefixed with the `(0, 0)` anchor.
pub fn pro_curve(maps: &[PixelAnomalyMap], masks: &[BinaryMask], thresholds: &[f32]) -> Result<Vec<ProPoint>> {
    check_shapes(maps, masks)?;
    let t = thresholds.len();
    // Histogram each pixel by the first (highest) threshold it clears.
    let mut normal_hist = vec![0u64; t + 1];
    let mut region_hists: Vec<Vec<u64>> = Vec::new();
    let mut region_sizes: Vec<u64> = Vec::new();
    let mut n_normal = 0u64;
    let bucket = |v: f32| thresholds.partition_point(|&th| th > v);
    for (m, g) in maps.iter().zip(masks) {
        let (labels, n_regions) = connected_components(g);
        let base = region_hists.len();
        region_hists.extend((0..n_regions).map(|_| vec![0u64; t + 1]));
        region_sizes.extend(std::iter::repeat_n(0, n_regions));
        for (&v, &lab) in m.values.iter().zip(&labels) {
            let b = bucket(v);
            if lab == 0 {
                n_normal += 1;
                normal_hist[b] += 1;
            } else {
                let r = base + lab as usize - 1;
                region_hists[r][b] += 1;
                region_sizes[r] += 1;
            }
        }
    }
    if region_sizes.is_empty() {
        return Err(Error::NoAnomalousRegion);
    }
    if n_normal == 0 {
        return Err(Error::SingleClass);
    }
    let mut curve = Vec::with_capacity(t + 1);
    curve.push(ProPoint { fpr: 0.0, pro: 0.0 });
    let mut fp = 0u64;
    let mut hits = vec![0u64; region_sizes.len()];
    for k in 0..t {
        fp += normal_hist[k];
        let mut overlap = 0.0;
        for (r, hist) in region_hists.iter().enumerate() {
            hits[r] += hist[k];
            overlap += hits[r] as f64 / region_sizes[r] as f64;
        }
        curve.push(ProPoint { fpr: fp as f64 / n_normal as f64, pro: overlap / region_sizes.len() as f64 });
    }
    Ok(curve)
}

/// Trapezoid area under a PRO curve over `[0, fpr_limit]`, with linear
/// interpolation at the limit, divided by `fpr_limit`.
pub fn integrate_pro(curve: &[ProPoint], fpr_limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.fpr >= fpr_limit {
            break;
        }
        if b.fpr <= fpr_limit {
            area += (b.fpr - a.fpr) * (a.pro + b.pro) / 2.0;
        } else {
            let t = (fpr_limit - a.fpr) / (b.fpr - a.fpr);
            let pro_at = a.pro + t * (b.pro - a.pro);
            area += (fpr_limit - a.fpr) * (a.pro + pro_at) / 2.0;
            break;
        }
    }
    area / fpr_limit
}

/// Normalized area under the PRO curve up to `fpr_limit`, with thresholds at
/// `n_thresholds` quantile levels of the map values.
pub fn aupro(maps: &[PixelAnomalyMap], masks: &[BinaryMask], fpr_limit: f64, n_thresholds: usize) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Config(format!("fpr_limit {fpr_limit} must lie in (0, 1]")));
    }
    if n_thresholds == 0 {
        return Err(Error::Config("n_thresholds must be positive".into()));
    }
    check_shapes(maps, masks)?;
    let thresholds = quantile_thresholds(maps, n_thresholds);
    let curve = pro_curve(maps, masks, &thresholds)?;
    Ok(integrate_pro(&curve, fpr_limit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: String,
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub aupro: Option<f64>,
    pub n_images: usize,
    pub n_anomalous: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MacroAverage {
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub aupro: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category: Vec<CategoryMetrics>,
    pub macro_average: MacroAverage,
}

impl EvalReport {
    /// Builds a report whose macro average is the unweighted mean over the
    /// categories that define each metric.
    pub fn from_categories(per_category: Vec<CategoryMetrics>) -> Self {
        fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
            let v: Vec<f64> = values.flatten().collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        }
        let macro_average = MacroAverage {
            image_auroc: mean(per_category.iter().map(|c| c.image_auroc)),
            image_ap: mean(per_category.iter().map(|c| c.image_ap)),
            pixel_auroc: mean(per_category.iter().map(|c| c.pixel_auroc)),
            aupro: mean(per_category.iter().map(|c| c.aupro)),
        };
        Self { per_category, macro_average }
    }
}

/// Image- and pixel-level metrics for one category. Pixel metrics are
/// skipped when `pixel` is `None`; undefined metrics (e.g. a category with no
/// anomalous image) are reported as `None`.
pub fn evaluate_category(
    category: &str,
    image_scores: &[f64],
    image_labels: &[bool],
    pixel: Option<(&[PixelAnomalyMap], &[BinaryMask])>,
) -> Result<CategoryMetrics> {
    let defined = |r: Result<f64>| -> Result<Option<f64>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::SingleClass | Error::NoPositives | Error::NoAnomalousRegion) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let (pixel_auroc, pro) = match pixel {
        Some((maps, masks)) => (
            defined(pixel_auroc(maps, masks))?,
            defined(aupro(maps, masks, DEFAULT_FPR_LIMIT, DEFAULT_PRO_THRESHOLDS))?,
        ),
        None => (None, None),
    };
    Ok(CategoryMetrics {
        category: category.to_string(),
        image_auroc: defined(auroc(image_scores, image_labels))?,
        image_ap: defined(average_precision(image_scores, image_labels))?,
        pixel_auroc,
        aupro: pro,
        n_images: image_scores.len(),
        n_anomalous: image_labels.iter().filter(|&&l| l).count(),
    })
}
