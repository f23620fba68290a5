//! Fused dot-product / extremum kernel behind the scoring engine.
//!
//! For a pair of unit-normalized images `A` (`L_a x D`) and `B` (`L_b x D`)
//! the kernel computes the Gram tile `A . B^T` block by block and folds each
//! finished tile straight into two running reductions: the best dot per row
//! of `A` (over every patch of `B`) and, optionally, the best dot per row of
//! `B` (over every patch of `A`). The full Gram matrix is never stored.
//!
//! Packing:
//! - row side: blocks of [`MR`] patches laid out `[block][dim][MR]`
//! - column side: panels of [`NR`] patches laid out `[panel][dim][NR]`
//!
//! Padding patches are zero vectors and are excluded from every reduction.
//! Accumulation order over `dim` is fixed (ascending, in [`KC`] chunks), so
//! results are bit-identical however pairs are scheduled across threads.

use std::sync::OnceLock;

pub const MR: usize = 8;
pub const NR: usize = 32;
pub const KC: usize = 256;

/// Which extremum of the dot product a reduction keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extremum {
    /// Largest dot, i.e. the nearest patch in cosine distance.
    MaxDot,
    /// Smallest dot, i.e. the farthest patch.
    MinDot,
}

impl Extremum {
    #[inline(always)]
    fn pick(self, a: f32, b: f32) -> f32 {
        match self {
            Extremum::MaxDot => {
                if b > a {
                    b
                } else {
                    a
                }
            }
            Extremum::MinDot => {
                if b < a {
                    b
                } else {
                    a
                }
            }
        }
    }

    fn identity(self) -> f32 {
        match self {
            Extremum::MaxDot => f32::NEG_INFINITY,
            Extremum::MinDot => f32::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Portable,
    Avx2,
    Avx512,
}

impl KernelKind {
    /// Fastest kernel the running CPU supports.
    pub fn detect() -> Self {
        static KIND: OnceLock<KernelKind> = OnceLock::new();
        *KIND.get_or_init(|| {
            #[cfg(target_arch = "x86_64")]
            {
                if is_x86_feature_detected!("avx512f") {
                    return KernelKind::Avx512;
                }
                if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                    return KernelKind::Avx2;
                }
            }
            KernelKind::Portable
        })
    }

    pub fn is_supported(self) -> bool {
        match self {
            KernelKind::Portable => true,
            #[cfg(target_arch = "x86_64")]
            KernelKind::Avx2 => is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"),
            #[cfg(target_arch = "x86_64")]
            KernelKind::Avx512 => is_x86_feature_detected!("avx512f"),
            #[cfg(not(target_arch = "x86_64"))]
            _ => false,
        }
    }

    /// Every kernel usable on this CPU, portable first.
    pub fn available() -> Vec<Self> {
        let mut out = vec![KernelKind::Portable];
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                out.push(KernelKind::Avx2);
            }
            if is_x86_feature_detected!("avx512f") {
                out.push(KernelKind::Avx512);
            }
        }
        out
    }
}

/// One image packed for both sides of the kernel.
#[derive(Debug, Clone)]
pub struct PackedImage {
    n_patches: usize,
    dim: usize,
    rows: Vec<f32>,
    cols: Vec<f32>,
}

impl PackedImage {
    /// Packs an `n_patches x dim` row-major block of patch vectors.
    pub fn new(vectors: &[f32], n_patches: usize, dim: usize) -> Self {
        assert_eq!(vectors.len(), n_patches * dim);
        Self { n_patches, dim, rows: pack(vectors, n_patches, dim, MR), cols: pack(vectors, n_patches, dim, NR) }
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn row_blocks(&self) -> usize {
        self.n_patches.div_ceil(MR)
    }

    fn col_panels(&self) -> usize {
        self.n_patches.div_ceil(NR)
    }
}

fn pack(vectors: &[f32], n: usize, dim: usize, width: usize) -> Vec<f32> {
    let blocks = n.div_ceil(width);
    let mut out = vec![0.0f32; blocks * dim * width];
    for p in 0..n {
        let (blk, lane) = (p / width, p % width);
        let base = blk * dim * width + lane;
        for (d, &x) in vectors[p * dim..(p + 1) * dim].iter().enumerate() {
            out[base + d * width] = x;
        }
    }
    out
}

/// Best dot per patch of `a` over all patches of `b` (written to `row_best`),
/// and, when `col_best` is given, best dot per patch of `b` over all of `a`.
pub fn pair_extrema(
    kind: KernelKind,
    a: &PackedImage,
    b: &PackedImage,
    ext: Extremum,
    row_best: &mut [f32],
    mut col_best: Option<&mut [f32]>,
) {
    assert!(kind.is_supported(), "{kind:?} kernel is not supported on this CPU");
    assert_eq!(a.dim, b.dim, "packed images must share the embedding dimension");
    assert_eq!(row_best.len(), a.n_patches);
    if let Some(c) = col_best.as_deref() {
        assert_eq!(c.len(), b.n_patches);
    }
    let dim = a.dim;
    row_best.fill(ext.identity());
    if let Some(c) = col_best.as_deref_mut() {
        c.fill(ext.identity());
    }
    if a.n_patches == 0 || b.n_patches == 0 {
        return;
    }

    let mut tile = [0.0f32; MR * NR];
    for panel in 0..b.col_panels() {
        let b_panel = &b.cols[panel * dim * NR..(panel + 1) * dim * NR];
        let valid_c = NR.min(b.n_patches - panel * NR);
        for blk in 0..a.row_blocks() {
            let a_block = &a.rows[blk * dim * MR..(blk + 1) * dim * MR];
            let valid_r = MR.min(a.n_patches - blk * MR);
            tile.fill(0.0);
            let mut d0 = 0;
            while d0 < dim {
                let kc = KC.min(dim - d0);
                micro_tile(kind, &a_block[d0 * MR..(d0 + kc) * MR], &b_panel[d0 * NR..(d0 + kc) * NR], kc, &mut tile);
                d0 += kc;
            }
            for r in 0..valid_r {
                let row = &tile[r * NR..r * NR + valid_c];
                let best = row.iter().fold(ext.identity(), |acc, &v| ext.pick(acc, v));
                let slot = &mut row_best[blk * MR + r];
                *slot = ext.pick(*slot, best);
            }
            if let Some(cb) = col_best.as_deref_mut() {
                let cb = &mut cb[panel * NR..panel * NR + valid_c];
                for r in 0..valid_r {
                    for (slot, &v) in cb.iter_mut().zip(&tile[r * NR..r * NR + valid_c]) {
                        *slot = ext.pick(*slot, v);
                    }
                }
            }
        }
    }
}

/// `tile[r][c] += sum_d a[d][r] * b[d][c]` over `kc` steps.
#[inline]
fn micro_tile(kind: KernelKind, a: &[f32], b: &[f32], kc: usize, tile: &mut [f32; MR * NR]) {
    debug_assert_eq!(a.len(), kc * MR);
    debug_assert_eq!(b.len(), kc * NR);
    match kind {
        #[cfg(target_arch = "x86_64")]
        KernelKind::Avx512 => unsafe { x86::tile_avx512(a.as_ptr(), b.as_ptr(), kc, tile) },
        #[cfg(target_arch = "x86_64")]
        KernelKind::Avx2 => unsafe { x86::tile_avx2(a.as_ptr(), b.as_ptr(), kc, tile) },
        _ => tile_portable(a, b, kc, tile),
    }
}

fn tile_portable(a: &[f32], b: &[f32], kc: usize, tile: &mut [f32; MR * NR]) {
    let mut acc = [[0.0f32; NR]; MR];
    for d in 0..kc {
        let av: &[f32; MR] = a[d * MR..(d + 1) * MR].try_into().unwrap();
        let bv: &[f32; NR] = b[d * NR..(d + 1) * NR].try_into().unwrap();
        for r in 0..MR {
            let x = av[r];
            for c in 0..NR {
                acc[r][c] += x * bv[c];
            }
        }
    }
    for r in 0..MR {
        for c in 0..NR {
            tile[r * NR + c] += acc[r][c];
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::{MR, NR};
    use std::arch::x86_64::*;

    /// Caller guarantees AVX-512F support and `kc * MR` / `kc * NR` readable floats.
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn tile_avx512(a: *const f32, b: *const f32, kc: usize, tile: &mut [f32; MR * NR]) {
        let mut acc = [[_mm512_setzero_ps(); 2]; MR];
        for d in 0..kc {
            let b0 = _mm512_loadu_ps(b.add(d * NR));
            let b1 = _mm512_loadu_ps(b.add(d * NR + 16));
            let ap = a.add(d * MR);
            for (r, row) in acc.iter_mut().enumerate() {
                let x = _mm512_set1_ps(*ap.add(r));
                row[0] = _mm512_fmadd_ps(x, b0, row[0]);
                row[1] = _mm512_fmadd_ps(x, b1, row[1]);
            }
        }
        let t = tile.as_mut_ptr();
        for (r, row) in acc.iter().enumerate() {
            for (h, v) in row.iter().enumerate() {
                let p = t.add(r * NR + h * 16);
                _mm512_storeu_ps(p, _mm512_add_ps(_mm512_loadu_ps(p), *v));
            }
        }
    }

    /// Caller guarantees AVX2 + FMA support and `kc * MR` / `kc * NR` readable floats.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn tile_avx2(a: *const f32, b: *const f32, kc: usize, tile: &mut [f32; MR * NR]) {
        // 4 rows x 16 columns per pass keeps 8 accumulators plus operands in the 16 ymm registers.
        for r0 in (0..MR).step_by(4) {
            for c0 in (0..NR).step_by(16) {
                let mut acc = [[_mm256_setzero_ps(); 2]; 4];
                for d in 0..kc {
                    let b0 = _mm256_loadu_ps(b.add(d * NR + c0));
                    let b1 = _mm256_loadu_ps(b.add(d * NR + c0 + 8));
                    let ap = a.add(d * MR + r0);
                    for (r, row) in acc.iter_mut().enumerate() {
                        let x = _mm256_broadcast_ss(&*ap.add(r));
                        row[0] = _mm256_fmadd_ps(x, b0, row[0]);
                        row[1] = _mm256_fmadd_ps(x, b1, row[1]);
                    }
                }
                let t = tile.as_mut_ptr();
                for (r, row) in acc.iter().enumerate() {
                    for (h, v) in row.iter().enumerate() {
                        let p = t.add((r0 + r) * NR + c0 + h * 8);
                        _mm256_storeu_ps(p, _mm256_add_ps(_mm256_loadu_ps(p), *v));
                    }
                }
            }
        }
    }
}
