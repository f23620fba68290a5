//! Pixel-resolution anomaly maps and heatmap rendering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::PatchScoreMap;

pub const DEFAULT_SIGMA: f64 = 4.0;

/// Row-major `height x width` anomaly values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelAnomalyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub source_query: String,
}

impl PixelAnomalyMap {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Bilinear upsampling anchored at patch centres (edge-clamped), followed by
/// a separable Gaussian blur with standard deviation `sigma` pixels.
/// `sigma == 0` disables the blur.
pub fn to_pixel_map(map: &PatchScoreMap, image_size: (usize, usize), sigma: f64) -> Result<PixelAnomalyMap> {
    let (w, h) = image_size;
    let (rows, cols) = (map.grid.rows, map.grid.cols);
    if rows * cols != map.scores.len() || rows == 0 || cols == 0 {
        return Err(Error::GridMismatch(format!("{} scores for a {rows}x{cols} grid", map.scores.len())));
    }
    if w == 0 || h == 0 {
        return Err(Error::GridMismatch(format!("image size {w}x{h}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma {sigma} must be finite and non-negative")));
    }

    let xs: Vec<(usize, usize, f64)> = (0..w).map(|x| axis_sample(x, w, cols)).collect();
    let ys: Vec<(usize, usize, f64)> = (0..h).map(|y| axis_sample(y, h, rows)).collect();
    let s = |r: usize, c: usize| f64::from(map.scores[r * cols + c]);
    let mut values = vec![0.0f64; w * h];
    for (y, &(r0, r1, fy)) in ys.iter().enumerate() {
        for (x, &(c0, c1, fx)) in xs.iter().enumerate() {
            let top = (1.0 - fx) * s(r0, c0) + fx * s(r0, c1);
            let bottom = (1.0 - fx) * s(r1, c0) + fx * s(r1, c1);
            values[y * w + x] = (1.0 - fy) * top + fy * bottom;
        }
    }
    if sigma > 0.0 {
        gaussian_blur(&mut values, w, h, sigma);
    }
    Ok(PixelAnomalyMap {
        width: w,
        height: h,
        values: values.into_iter().map(|v| v as f32).collect(),
        source_query: map.query_name.clone(),
    })
}

/// Neighbouring grid cells and blend weight for output pixel `i` of `n`.
fn axis_sample(i: usize, n: usize, cells: usize) -> (usize, usize, f64) {
    let g = ((i as f64 + 0.5) * cells as f64 / n as f64 - 0.5).clamp(0.0, (cells - 1) as f64);
    let lo = g.floor() as usize;
    let hi = (lo + 1).min(cells - 1);
    (lo, hi, g - lo as f64)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

fn gaussian_blur(values: &mut [f64], w: usize, h: usize, sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        let row = &values[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] =
                kernel.iter().enumerate().map(|(t, k)| k * row[clamp(x as isize + t as isize - radius, w)]).sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            values[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * tmp[clamp(y as isize + t as isize - radius, h) * w + x])
                .sum();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Global { min: f32, max: f32 },
    PerImage,
}

/// 8-bit quantization: `round_half_up(255 * clamp((v - min) / (max - min), 0, 1))`,
/// and all zeros when `max == min`.
pub fn quantize(map: &PixelAnomalyMap, normalization: Normalization) -> Vec<u8> {
    let (lo, hi) = match normalization {
        Normalization::Global { min, max } => (min, max),
        Normalization::PerImage => map.min_max(),
    };
    let (lo, hi) = (f64::from(lo), f64::from(hi));
    if !(hi > lo) {
        return vec![0; map.values.len()];
    }
    map.values
        .iter()
        .map(|&v| {
            let t = ((f64::from(v) - lo) / (hi - lo)).clamp(0.0, 1.0);
            (255.0 * t + 0.5).floor() as u8
        })
        .collect()
}

/// Writes the map as an 8-bit grayscale PNG.
pub fn render_heatmap(map: &PixelAnomalyMap, path: impl AsRef<Path>, normalization: Normalization) -> Result<()> {
    let bytes = quantize(map, normalization);
    let img = image::GrayImage::from_raw(map.width as u32, map.height as u32, bytes)
        .ok_or_else(|| Error::ShapeMismatch("pixel buffer does not match map size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Binary ground-truth mask, row-major, 1 = anomalous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Reads a mask image; any nonzero pixel is anomalous.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(BinaryMask {
        width: w as usize,
        height: h as usize,
        data: img.into_raw().into_iter().map(|v| u8::from(v != 0)).collect(),
    })
}
