//! Rigid registration (grid-searched rotation + phase-correlation translation)
//! and the aligned / rotated prompt variants.

use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::PatchScoreMap;
use crate::store::{Grid, NormalizedBank};

/// Longest side used for registration; larger inputs are box-downsampled.
pub const REGISTRATION_MAX_SIDE: usize = 256;

/// The default angle grid: -20..=20 degrees in 1 degree steps.
pub fn default_angle_grid() -> Vec<f64> {
    (-20..=20).map(f64::from).collect()
}

/// Rotation by `angle_deg` about the image center followed by a translation.
///
/// A point `q` maps to `R(angle) (q - c) + c + (dx, dy)`, with `c` the center
/// of the pixel grid and `R` acting on `(x, y)` in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub angle_deg: f64,
    pub dx: f64,
    pub dy: f64,
    pub confidence: f64,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

fn wrap_angle(mut a: f64) -> f64 {
    while a > 180.0 {
        a -= 360.0;
    }
    while a < -180.0 {
        a += 360.0;
    }
    a
}

fn rotate(angle_deg: f64, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = angle_deg.to_radians().sin_cos();
    (c * x - s * y, s * x + c * y)
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { angle_deg: 0.0, dx: 0.0, dy: 0.0, confidence: 1.0 }
    }

    pub fn rotation(angle_deg: f64) -> Self {
        Self { angle_deg: wrap_angle(angle_deg), ..Self::identity() }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self { dx, dy, ..Self::identity() }
    }

    pub fn inverse(&self) -> Self {
        let (x, y) = rotate(-self.angle_deg, self.dx, self.dy);
        Self { angle_deg: wrap_angle(-self.angle_deg), dx: -x, dy: -y, confidence: self.confidence }
    }

    /// The transform equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &RigidTransform) -> Self {
        let (x, y) = rotate(next.angle_deg, self.dx, self.dy);
        Self {
            angle_deg: wrap_angle(self.angle_deg + next.angle_deg),
            dx: x + next.dx,
            dy: y + next.dy,
            confidence: self.confidence.min(next.confidence),
        }
    }

    /// Rescales the translation from pixels to patch cells.
    pub fn to_patch_units(&self, image_size: (usize, usize), grid: Grid) -> Self {
        Self {
            dx: self.dx * grid.cols as f64 / image_size.0 as f64,
            dy: self.dy * grid.rows as f64 / image_size.1 as f64,
            ..*self
        }
    }

    /// Source coordinate sampled for output pixel `(x, y)`.
    fn source(&self, x: f64, y: f64, cx: f64, cy: f64) -> (f64, f64) {
        let (sx, sy) = rotate(-self.angle_deg, x - self.dx - cx, y - self.dy - cy);
        (sx + cx, sy + cy)
    }
}

/// Row-major grayscale image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DimensionMismatch(format!("image must be non-empty, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::LengthMismatch { expected: width * height, got: pixels.len() });
        }
        if let Some(index) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { what: "image", index });
        }
        Ok(Self { width, height, pixels })
    }

    /// Luminance of any 8- or 16-bit image file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_luma32f();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| f64::from(v)).sum::<f64>() / self.pixels.len() as f64
    }

    fn center(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    fn bilinear(&self, x: f64, y: f64, fill: f32) -> f32 {
        const SLACK: f64 = 1e-9;
        let (xmax, ymax) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if x < -SLACK || y < -SLACK || x > xmax + SLACK || y > ymax + SLACK {
            return fill;
        }
        let (x, y) = (x.clamp(0.0, xmax), y.clamp(0.0, ymax));
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let p = |xx: usize, yy: usize| f64::from(self.get(xx, yy));
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    }

    /// Box-averages by the smallest integer factor that brings the longer side
    /// to at most `max_side`; returns the factor used.
    pub fn downsample(&self, max_side: usize) -> (GrayImage, usize) {
        let factor = self.width.max(self.height).div_ceil(max_side.max(1)).max(1);
        if factor == 1 {
            return (self.clone(), 1);
        }
        let (w, h) = ((self.width / factor).max(1), (self.height / factor).max(1));
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                let mut n = 0usize;
                for yy in y * factor..((y + 1) * factor).min(self.height) {
                    for xx in x * factor..((x + 1) * factor).min(self.width) {
                        acc += f64::from(self.get(xx, yy));
                        n += 1;
                    }
                }
                pixels.push((acc / n as f64) as f32);
            }
        }
        (GrayImage { width: w, height: h, pixels }, factor)
    }
}

/// Applies `t` with bilinear sampling; samples falling outside the image take
/// the image mean.
pub fn warp(image: &GrayImage, t: &RigidTransform) -> GrayImage {
    let fill = image.mean() as f32;
    let (cx, cy) = image.center();
    let mut pixels = Vec::with_capacity(image.pixels.len());
    for y in 0..image.height {
        for x in 0..image.width {
            let (sx, sy) = t.source(x as f64, y as f64, cx, cy);
            pixels.push(image.bilinear(sx, sy, fill));
        }
    }
    GrayImage { width: image.width, height: image.height, pixels }
}

fn fft2(data: &mut [Complex<f64>], w: usize, h: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row.process(data);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
}

fn hann(n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![1.0; n];
    }
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()).collect()
}

/// Spectrum of the mean-removed, Hann-windowed image.
fn windowed_spectrum(img: &GrayImage, planner: &mut FftPlanner<f64>) -> Vec<Complex<f64>> {
    let (wx, wy) = (hann(img.width), hann(img.height));
    let mean = img.mean();
    let mut data: Vec<Complex<f64>> = img
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| Complex::new((f64::from(v) - mean) * wx[i % img.width] * wy[i / img.width], 0.0))
        .collect();
    fft2(&mut data, img.width, img.height, planner, false);
    data
}

/// Translation `s` with `reference(p) ≈ moving(p - s)`, plus the peak energy.
fn phase_correlate(reference: &[Complex<f64>], moving: &GrayImage, planner: &mut FftPlanner<f64>) -> (f64, f64, f64) {
    let (w, h) = (moving.width, moving.height);
    let spec = windowed_spectrum(moving, planner);
    let mut cross: Vec<Complex<f64>> = reference
        .iter()
        .zip(&spec)
        .map(|(a, b)| {
            let c = a * b.conj();
            let n = c.norm();
            if n > 1e-15 {
                c / n
            } else {
                Complex::new(0.0, 0.0)
            }
        })
        .collect();
    fft2(&mut cross, w, h, planner, true);
    let scale = 1.0 / (w * h) as f64;
    let surface: Vec<f64> = cross.iter().map(|c| c.re * scale).collect();
    let (mut best, mut at) = (f64::NEG_INFINITY, 0);
    for (i, &v) in surface.iter().enumerate() {
        if v > best {
            best = v;
            at = i;
        }
    }
    let (px, py) = (at % w, at / w);
    let value =
        |x: isize, y: isize| surface[(y.rem_euclid(h as isize) as usize) * w + x.rem_euclid(w as isize) as usize];
    // A fractional shift splits the peak over neighbouring bins, so both the
    // peak height and the sub-pixel offset come from the 3x3 neighbourhood.
    // The surface has unit energy, so the root energy of the neighbourhood is
    // at most 1 and reaches it only for an exact shift.
    let (ix, iy) = (px as isize, py as isize);
    let (mut mass, mut energy, mut mx, mut my) = (0.0, 0.0, 0.0, 0.0);
    for oy in -1..=1isize {
        for ox in -1..=1isize {
            let v = value(ix + ox, iy + oy);
            energy += v * v;
            let v = v.max(0.0);
            mass += v;
            mx += v * ox as f64;
            my += v * oy as f64;
        }
    }
    let (ox, oy) = if mass > 0.0 { (mx / mass, my / mass) } else { (0.0, 0.0) };
    let signed = |p: usize, n: usize| if p > n / 2 { p as f64 - n as f64 } else { p as f64 };
    (signed(px, w) + ox, signed(py, h) + oy, energy.sqrt())
}

/// Estimates the transform `t` with `warp(query, t) ≈ reference`.
///
/// Each candidate angle rotates the (downsampled) query about its center and
/// recovers the residual translation by phase correlation; the angle with the
/// highest correlation peak wins, ties going to the smaller `|angle|` and then
/// the smaller angle.
pub fn estimate_rigid(reference: &GrayImage, query: &GrayImage, angle_grid: &[f64]) -> Result<RigidTransform> {
    if reference.width != query.width || reference.height != query.height {
        return Err(Error::DimensionMismatch(format!(
            "reference is {}x{}, query is {}x{}",
            reference.width, reference.height, query.width, query.height
        )));
    }
    if angle_grid.is_empty() {
        return Err(Error::EmptyInput("angle grid"));
    }
    let (small_ref, factor) = reference.downsample(REGISTRATION_MAX_SIDE);
    let (small_query, _) = query.downsample(REGISTRATION_MAX_SIDE);
    let ref_spec = windowed_spectrum(&small_ref, &mut FftPlanner::new());

    let candidates: Vec<(f64, f64, f64, f64)> = angle_grid
        .par_iter()
        .map_init(FftPlanner::new, |planner, &angle| {
            let rotated = warp(&small_query, &RigidTransform::rotation(angle));
            let (sx, sy, peak) = phase_correlate(&ref_spec, &rotated, planner);
            (angle, sx, sy, peak)
        })
        .collect();
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        let better = c.3 > best.3
            || (c.3 == best.3 && (c.0.abs() < best.0.abs() || (c.0.abs() == best.0.abs() && c.0 < best.0)));
        if better {
            best = c;
        }
    }
    let (angle, sx, sy, peak) = best;
    let f = factor as f64;
    // Rotation about the downsampled center differs from rotation about the
    // full-resolution center by a fixed translation.
    let (ddx, ddy) = if factor == 1 {
        (0.0, 0.0)
    } else {
        let (cx, cy) = reference.center();
        let (scx, scy) = small_ref.center();
        let off = (f - 1.0) / 2.0;
        let (ex, ey) = (f * scx + off - cx, f * scy + off - cy);
        let (rx, ry) = rotate(angle, ex, ey);
        (ex - rx, ey - ry)
    };
    Ok(RigidTransform {
        angle_deg: wrap_angle(angle),
        dx: f * sx + ddx,
        dy: f * sy + ddy,
        confidence: peak.clamp(0.0, 1.0),
    })
}

/// `[prompt, prompt aligned to query, aligned prompt rotated a further 180 degrees]`.
pub fn build_prompt_variants(prompt: &GrayImage, query: &GrayImage) -> Result<Vec<GrayImage>> {
    let t = estimate_rigid(query, prompt, &default_angle_grid())?;
    let aligned = warp(prompt, &t);
    let flipped = warp(&aligned, &RigidTransform::rotation(180.0));
    Ok(vec![prompt.clone(), aligned, flipped])
}

/// Mean of the original, aligned and aligned+180 scores of one sample.
pub fn average_variant_scores(scores: &[f64]) -> Result<f64> {
    match scores {
        [a, b, c] => Ok((a + b + c) / 3.0),
        _ => Err(Error::WrongArity { expected: 3, got: scores.len() }),
    }
}

/// Unit-normalized mean of a set of patch vectors (zero when it vanishes).
pub fn mean_embedding(vectors: &[f32], dim: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; dim];
    for v in vectors.chunks_exact(dim) {
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += f64::from(x);
        }
    }
    let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return vec![0.0; dim];
    }
    acc.iter().map(|a| (a / norm) as f32).collect()
}

/// Grid-level warp: each output cell copies the nearest source cell under `t`
/// (translation in cell units), or `fill` when the source falls off the grid.
pub fn warp_patch_grid(vectors: &[f32], grid: Grid, dim: usize, t: &RigidTransform, fill: &[f32]) -> Vec<f32> {
    let (cx, cy) = ((grid.cols as f64 - 1.0) / 2.0, (grid.rows as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(vectors.len());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let (sx, sy) = t.source(c as f64, r as f64, cx, cy);
            let (ix, iy) = ((sx + 1e-9).round(), (sy + 1e-9).round());
            if ix < 0.0 || iy < 0.0 || ix >= grid.cols as f64 || iy >= grid.rows as f64 {
                out.extend_from_slice(fill);
            } else {
                let j = iy as usize * grid.cols + ix as usize;
                out.extend_from_slice(&vectors[j * dim..(j + 1) * dim]);
            }
        }
    }
    out
}

/// Warps every image of a bank at grid level, one transform (in cell units)
/// per image. Off-grid cells take the image's mean embedding and the mean
/// attention value.
pub fn warp_bank_images(bank: &NormalizedBank, transforms: &[RigidTransform]) -> Result<NormalizedBank> {
    if transforms.len() != bank.n_images() {
        return Err(Error::LengthMismatch { expected: bank.n_images(), got: transforms.len() });
    }
    let (grid, dim) = (bank.grid(), bank.dim());
    let mut vectors = Vec::with_capacity(bank.vectors.len());
    let mut attention = bank.attention.as_ref().map(|a| Vec::with_capacity(a.len()));
    for (i, t) in transforms.iter().enumerate() {
        let img = bank.image(i);
        vectors.extend(warp_patch_grid(img, grid, dim, t, &mean_embedding(img, dim)));
        if let (Some(out), Some(row)) = (attention.as_mut(), bank.attention_row(i)) {
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / row.len() as f64;
            out.extend(warp_patch_grid(row, grid, 1, t, &[mean as f32]));
        }
    }
    let degenerate = vectors.chunks_exact(dim).map(|v| v.iter().all(|&x| x == 0.0)).collect();
    Ok(NormalizedBank { meta: bank.meta.clone(), vectors, degenerate, attention })
}

/// Grid-level warp of a patch score map; off-grid cells take the map mean.
pub fn warp_score_map(map: &PatchScoreMap, t: &RigidTransform) -> PatchScoreMap {
    let mean = map.scores.iter().map(|&v| f64::from(v)).sum::<f64>() / map.scores.len().max(1) as f64;
    PatchScoreMap {
        scores: warp_patch_grid(&map.scores, map.grid, 1, t, &[mean as f32]),
        grid: map.grid,
        query_name: map.query_name.clone(),
    }
}
