//! Acceptance suite: one PASS/FAIL line per primary criterion.
//!
//! Run with `cargo test -p patchscore-cli --test acceptance`. Set
//! `ACCEPTANCE_SKIP_PERF=1` to leave out the large kernel run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use patchscore::alignment::{default_angle_grid, estimate_rigid, warp, GrayImage, RigidTransform};
use patchscore::fixtures::{gen_synthetic, oracle_score_batch, oracle_score_few_shot, KeyedRng, SyntheticSpec};
use patchscore::kernel::KernelKind;
use patchscore::masking::{apply_mask, attention_to_mask, AttentionMask};
use patchscore::metrics::{aupro, auroc, average_precision};
use patchscore::scoring::{
    image_score, k_p, patch_scores, score_batch_zero_shot, score_batch_zero_shot_with, score_few_shot_with,
    MatchMatrix, PatchScoreMap, Reduction, ScoringConfig, Setting,
};
use patchscore::store::{normalize_bank, Grid, PatchEmbeddingBank, StoreMetadata};
use patchscore::{BinaryMask, PixelAnomalyMap};

struct Outcome {
    pass: bool,
    detail: String,
    /// Set when the only unmet condition needs hardware this host lacks.
    hardware_limited: bool,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail, hardware_limited: false }
    }
}

fn report(name: &str, budget: Option<Duration>, run: impl FnOnce() -> Outcome) -> (bool, bool) {
    let start = Instant::now();
    let mut out = run();
    let elapsed = start.elapsed();
    if let Some(limit) = budget {
        if elapsed > limit {
            out.pass = false;
            out.hardware_limited = false;
            out.detail.push_str(&format!("; over the {:.0} s budget", limit.as_secs_f64()));
        }
    }
    let status = if out.pass { "PASS" } else { "FAIL" };
    println!("[{status}] {name} ({:.2} s): {}", elapsed.as_secs_f64(), out.detail);
    (out.pass, out.hardware_limited)
}

fn raw_bank(seed: u64, n: usize, rows: usize, cols: usize, dim: usize) -> PatchEmbeddingBank {
    let rng = KeyedRng::new(seed);
    let scale = 0.25 + rng.uniform(9, 9, 9) * 8.0;
    let mut embeddings: Vec<f32> =
        (0..n * rows * cols * dim).map(|k| ((rng.uniform(1, 0, k as u64) - 0.5) * scale) as f32).collect();
    // One degenerate patch in some banks.
    if seed.is_multiple_of(3) {
        for v in &mut embeddings[dim..2 * dim] {
            *v = 0.0;
        }
    }
    let meta = StoreMetadata {
        backbone_id: "acceptance".into(),
        image_size: (cols as u32 * 14, rows as u32 * 14),
        patch_size: 14,
        grid: (rows as u32, cols as u32),
        embed_dim: dim as u32,
        has_attention: false,
        image_names: (0..n).map(|i| format!("img{i}")).collect(),
        dataset_tag: "acceptance".into(),
        created_unix_ms: 0,
    };
    PatchEmbeddingBank::new(meta, embeddings, None).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut comparisons = 0usize;
    for seed in 1..=20u64 {
        let n = 2 + (seed as usize % 7);
        let (rows, cols) = [(4, 4), (8, 8), (5, 7), (3, 6), (6, 6)][seed as usize % 5];
        let dim = [8, 16, 32, 5, 13][(seed as usize / 5) % 5];
        let bank = if seed % 2 == 0 {
            raw_bank(seed, n, rows, cols, dim)
        } else {
            gen_synthetic(&SyntheticSpec {
                seed,
                n_images: n,
                grid: (rows, cols),
                embed_dim: dim,
                anomaly_rate: 0.3,
                anomaly_patch_count: 3,
                cluster_separation: 1.0,
                jitter: 0.3,
            })
            .unwrap()
            .bank
        };
        let half = n / 2;
        let queries: Vec<usize> = (0..half).collect();
        let prompts: Vec<usize> = (half..n).collect();
        let (qb, pb) = (bank.select(&queries), bank.select(&prompts));
        let (qn, pn, bn) = (normalize_bank(&qb, 1e-12), normalize_bank(&pb, 1e-12), normalize_bank(&bank, 1e-12));
        for reduction in [Reduction::Nearest, Reduction::Farthest] {
            for rho in [None, Some(0.1)] {
                for setting in [Setting::FewShot, Setting::BatchZeroShot] {
                    let cfg = ScoringConfig { per_image_reduction: reduction, rho, ..ScoringConfig::new(setting) };
                    let expected = match setting {
                        Setting::FewShot => oracle_score_few_shot(&qb, &pb, &cfg).unwrap(),
                        Setting::BatchZeroShot => oracle_score_batch(&bank, &cfg).unwrap(),
                    };
                    for kind in KernelKind::available() {
                        let got = match setting {
                            Setting::FewShot => score_few_shot_with(kind, &qn, &pn, &cfg).unwrap(),
                            Setting::BatchZeroShot => score_batch_zero_shot_with(kind, &bn, &cfg).unwrap(),
                        };
                        for (g, (map, score)) in got.iter().zip(&expected) {
                            for (a, b) in g.map.scores.iter().zip(&map.scores) {
                                worst = worst.max(f64::from((a - b).abs()));
                            }
                            worst = worst.max((g.score.value - score.value).abs());
                            comparisons += 1;
                        }
                    }
                }
            }
        }
    }
    Outcome::new(
        worst <= 1e-5,
        format!("max |engine - oracle| = {worst:.2e} over {comparisons} scored images (tolerance 1e-5)"),
    )
}

fn planted_detection() -> Outcome {
    let mut worst_image = 1.0f64;
    let mut worst_pixel = 1.0f64;
    for seed in 1..=10u64 {
        let fixture = gen_synthetic(&SyntheticSpec {
            seed,
            n_images: 16,
            grid: (8, 8),
            embed_dim: 64,
            anomaly_rate: 0.25,
            anomaly_patch_count: 6,
            cluster_separation: std::f64::consts::FRAC_PI_3,
            jitter: 0.05,
        })
        .unwrap();
        let bank = normalize_bank(&fixture.bank, 1e-12);
        let scored = score_batch_zero_shot(&bank, &ScoringConfig::batch_zero_shot()).unwrap();
        let scores: Vec<f64> = scored.iter().map(|s| s.score.value).collect();
        worst_image = worst_image.min(auroc(&scores, &fixture.image_labels).unwrap());
        let patch_scores: Vec<f32> = scored.iter().flat_map(|s| s.map.scores.iter().copied()).collect();
        let patch_labels: Vec<bool> = fixture.pixel_labels.iter().flatten().copied().collect();
        worst_pixel = worst_pixel.min(auroc(&patch_scores, &patch_labels).unwrap());
    }
    Outcome::new(
        worst_image == 1.0 && worst_pixel >= 0.99,
        format!("min image AUROC {worst_image:.4} (need 1.0), min patch-label pixel AUROC {worst_pixel:.4} (need >= 0.99), seeds 1..10"),
    )
}

fn pairwise_auroc(s: &[f64], l: &[bool]) -> f64 {
    let (mut wins, mut total) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                total += 1.0;
                wins += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / total
}

fn exhaustive_ap(s: &[f64], l: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_pos = l.iter().filter(|&&x| x).count() as f64;
    let (mut ap, mut prev) = (0.0, 0.0);
    for t in thresholds {
        let tp = s.iter().zip(l).filter(|(&v, &y)| v >= t && y).count() as f64;
        let predicted = s.iter().filter(|&&v| v >= t).count() as f64;
        let recall = tp / n_pos;
        ap += (recall - prev) * (tp / predicted);
        prev = recall;
    }
    ap
}

/// Union-find 8-connected labelling.
fn regions(mask: &[bool], w: usize, h: usize) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..w * h).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for (dx, dy) in [(1i64, 0i64), (0, 1), (1, 1), (-1, 1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && mask[ny as usize * w + nx as usize] {
                    let (a, b) = (root(&mut parent, y * w + x), root(&mut parent, ny as usize * w + nx as usize));
                    parent[a] = b;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..w * h {
        if mask[i] {
            let r = root(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
    }
    groups.into_values().collect()
}

/// Every distinct value as a threshold, full trapezoid up to the limit.
fn exhaustive_aupro(values: &[f32], mask: &[bool], w: usize, h: usize, limit: f64) -> f64 {
    let regs = regions(mask, w, h);
    let n_normal = mask.iter().filter(|&&m| !m).count() as f64;
    let mut thresholds: Vec<f32> = values.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut pts = vec![(0.0f64, 0.0f64)];
    for t in thresholds {
        let fp = values.iter().zip(mask).filter(|(&v, &m)| !m && v >= t).count() as f64;
        let pro =
            regs.iter().map(|r| r.iter().filter(|&&i| values[i] >= t).count() as f64 / r.len() as f64).sum::<f64>()
                / regs.len() as f64;
        pts.push((fp / n_normal, pro));
    }
    let mut area = 0.0;
    for p in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (p[0], p[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (limit - x0) / (x1 - x0) * (y1 - y0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area / limit
}

fn metric_oracles() -> Outcome {
    let mut worst_auc = 0.0f64;
    let mut worst_ap = 0.0f64;
    for inst in 0..100u64 {
        let rng = KeyedRng::new(1000 + inst);
        let n = 2 + (rng.uniform(0, 0, 0) * 499.0) as usize;
        let levels = 1 + (rng.uniform(0, 0, 1) * 60.0) as u64;
        let mut s: Vec<f64> = (0..n).map(|i| (rng.uniform(1, i as u64, 0) * levels as f64).floor() / 7.0).collect();
        let mut l: Vec<bool> = (0..n).map(|i| rng.uniform(2, i as u64, 0) < 0.3).collect();
        l[0] = true;
        l[1] = false;
        if inst % 4 == 0 {
            for v in &mut s {
                *v += rng.uniform(3, (*v * 1e6) as u64, 0);
            }
        }
        worst_auc = worst_auc.max((auroc(&s, &l).unwrap() - pairwise_auroc(&s, &l)).abs());
        worst_ap = worst_ap.max((average_precision(&s, &l).unwrap() - exhaustive_ap(&s, &l)).abs());
    }

    let (w, h) = (16usize, 16usize);
    let mut cases: Vec<(&str, Vec<f32>, Vec<bool>, f64, Option<f64>)> = Vec::new();
    let mut blob = vec![false; w * h];
    for y in 4..8 {
        for x in 5..9 {
            blob[y * w + x] = true;
        }
    }
    blob[12 * w + 12] = true;
    cases.push(("constant map", vec![0.25; w * h], blob.clone(), 1.0, Some(0.5)));
    cases.push(("perfect map", blob.iter().map(|&b| f32::from(u8::from(b))).collect(), blob.clone(), 0.3, Some(1.0)));
    for c in 0..12u64 {
        let rng = KeyedRng::new(77 + c);
        let mut mask = vec![false; w * h];
        for r in 0..1 + c % 3 {
            let (x0, y0) = ((rng.uniform(r, 0, 0) * 12.0) as usize, (rng.uniform(r, 0, 1) * 12.0) as usize);
            let (bw, bh) = (1 + (rng.uniform(r, 0, 2) * 4.0) as usize, 1 + (rng.uniform(r, 0, 3) * 4.0) as usize);
            for y in y0..(y0 + bh).min(h) {
                for x in x0..(x0 + bw).min(w) {
                    mask[y * w + x] = true;
                }
            }
        }
        // Values constant on 2x2 blocks, so every distinct value occurs at least four times.
        let values: Vec<f32> = (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                let b = ((y / 2) * (w / 2) + x / 2) as u64;
                let lift = if mask[(y / 2 * 2) * w + x / 2 * 2] { 0.4 } else { 0.0 };
                ((rng.uniform(7, b, 0) * 0.8 + lift) * 64.0).round() as f32 / 64.0
            })
            .collect();
        let limit = [0.3, 0.1, 0.5, 1.0][c as usize % 4];
        cases.push(("blocky map", values, mask, limit, None));
    }
    let mut worst_pro = 0.0f64;
    let mut pinned_ok = true;
    for (_, values, mask, limit, pinned) in &cases {
        let map = PixelAnomalyMap { width: w, height: h, values: values.clone(), source_query: "c".into() };
        let gt = BinaryMask { width: w, height: h, data: mask.iter().map(|&m| u8::from(m)).collect() };
        let got = aupro(&[map], &[gt], *limit, 200).unwrap();
        let want = exhaustive_aupro(values, mask, w, h, *limit);
        worst_pro = worst_pro.max((got - want).abs());
        if let Some(p) = pinned {
            pinned_ok &= (got - p).abs() <= 1e-3;
        }
    }
    Outcome::new(
        worst_auc <= 1e-9 && worst_ap <= 1e-9 && worst_pro <= 1e-3 && pinned_ok,
        format!(
            "AUROC max err {worst_auc:.1e}, AP max err {worst_ap:.1e} (100 instances, tol 1e-9); AUPRO max err {worst_pro:.1e} over {} 16x16 cases incl. constant map = 0.5 at fpr_limit 1 (tol 1e-3)",
            cases.len()
        ),
    )
}

fn formula_checks() -> Outcome {
    let mut failures = Vec::new();
    let batch = ScoringConfig::batch_zero_shot();
    let few = ScoringConfig::few_shot();
    if k_p(63, &batch) != 18 {
        failures.push(format!("k_p(63, batch) = {}", k_p(63, &batch)));
    }
    if k_p(2, &batch) != 1 {
        failures.push("k_p(2, batch) != 1".into());
    }
    if let Some(n) = (1..=1000).find(|&n| k_p(n, &few) != 1) {
        failures.push(format!("k_p({n}, few) != 1"));
    }
    let map = |v: Vec<f32>| PatchScoreMap { grid: Grid::new(1, v.len()), scores: v, query_name: "q".into() };
    for seed in 0..100u64 {
        let rng = KeyedRng::new(seed);
        let v: Vec<f32> = (0..1 + seed as usize).map(|k| rng.uniform(0, k as u64, 0) as f32 * 2.0).collect();
        let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if image_score(&map(v), None, &few).unwrap().value != f64::from(max) {
            failures.push(format!("K_I=1 score is not the max (seed {seed})"));
        }
    }
    let half = ScoringConfig { rho: Some(0.5), ..few };
    if (image_score(&map(vec![0.2, 0.4, 0.6, 0.8]), None, &half).unwrap().value - 0.7).abs() > 1e-7 {
        failures.push("top-2 image score".into());
    }
    let u = MatchMatrix { values: vec![0.1, 0.5, 0.9], n_patches: 1, n_refs: 3 };
    let kp2 = ScoringConfig { kp_fraction: 0.7, ..batch };
    if (patch_scores(&u, Grid::new(1, 1), "q", &kp2).unwrap().scores[0] - 0.7).abs() > 1e-7 {
        failures.push("top-2 patch score".into());
    }
    let cases: [(&[f32], &[f32]); 3] = [
        (&[0.0, 1.0, 0.5], &[0.5, 1.0, 1.0]),
        (&[0.3, 0.3, 0.3], &[1.0, 1.0, 1.0]),
        (&[10.0, 10.4, 20.0], &[0.5, 0.5, 1.0]),
    ];
    for (attn, want) in cases {
        if attention_to_mask(attn, 0.05).unwrap().weights != want {
            failures.push(format!("mask of {attn:?}"));
        }
    }
    let masked = apply_mask(&map(vec![0.8, 0.8]), &AttentionMask { weights: vec![0.5, 1.0] }).unwrap();
    if masked.scores != [0.4, 0.8] {
        failures.push("apply_mask [0.8, 0.8] x [0.5, 1.0]".into());
    }
    let rng = KeyedRng::new(5);
    let scores: Vec<f32> = (0..64).map(|k| rng.uniform(0, k, 0) as f32).collect();
    let weights: Vec<f32> = (0..64).map(|k| if rng.uniform(1, k, 0) < 0.5 { 0.5 } else { 1.0 }).collect();
    let out = apply_mask(&map(scores.clone()), &AttentionMask { weights: weights.clone() }).unwrap();
    if out.scores.iter().zip(scores.iter().zip(&weights)).any(|(o, (s, w))| *o != s * w) {
        failures.push("random element-wise product".into());
    }
    if apply_mask(&map(scores.clone()), &AttentionMask::all_foreground(64)).unwrap().scores != scores {
        failures.push("all-ones mask".into());
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            "k_p(63,batch)=18, k_p(n,few)=1 for n<=1000, K_I=1 gives max, masking cases exact".into()
        } else {
            failures.join("; ")
        },
    )
}

/// Broadband texture: keyed white noise under a separable gaussian blur.
fn texture(size: usize, seed: u64) -> GrayImage {
    let rng = KeyedRng::new(seed);
    let noise: Vec<f64> = (0..size * size).map(|i| rng.uniform(2, i as u64, 0)).collect();
    let sigma = 1.5f64;
    let radius = 5isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let blur = |src: &[f64], horizontal: bool| -> Vec<f64> {
        (0..size * size)
            .map(|i| {
                let (x, y) = ((i % size) as isize, (i / size) as isize);
                let mut acc = 0.0;
                for (k, w) in (-radius..=radius).zip(&kernel) {
                    let (sx, sy) = if horizontal {
                        ((x + k).clamp(0, size as isize - 1), y)
                    } else {
                        (x, (y + k).clamp(0, size as isize - 1))
                    };
                    acc += w * src[sy as usize * size + sx as usize];
                }
                acc / norm
            })
            .collect()
    };
    let smooth = blur(&blur(&noise, true), false);
    let (lo, hi) = smooth.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    GrayImage::new(size, size, smooth.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()).unwrap()
}

fn alignment_recovery() -> Outcome {
    let grid = default_angle_grid();
    let mut recovered = 0;
    let mut misses = Vec::new();
    for trial in 0..100u64 {
        let rng = KeyedRng::new(5000 + trial);
        let truth = RigidTransform {
            angle_deg: (rng.uniform(0, 0, 0) * 2.0 - 1.0) * 15.0,
            dx: (rng.uniform(0, 0, 1) * 2.0 - 1.0) * 10.0,
            dy: (rng.uniform(0, 0, 2) * 2.0 - 1.0) * 10.0,
            confidence: 1.0,
        };
        let reference = texture(160, trial);
        let query = warp(&reference, &truth);
        let est = estimate_rigid(&reference, &query, &grid).unwrap();
        let want = truth.inverse();
        let ok = (est.angle_deg - want.angle_deg).abs() <= 1.0
            && (est.dx - want.dx).abs() <= 2.0
            && (est.dy - want.dy).abs() <= 2.0;
        if ok {
            recovered += 1;
        } else if misses.len() < 3 {
            misses.push(format!(
                "trial {trial}: want ({:.1}, {:.1}, {:.1}) got ({:.1}, {:.1}, {:.1})",
                want.angle_deg, want.dx, want.dy, est.angle_deg, est.dx, est.dy
            ));
        }
    }
    let mut detail = format!("{recovered}/100 within 1 deg / 2 px (need >= 95)");
    if !misses.is_empty() {
        detail.push_str(&format!("; {}", misses.join("; ")));
    }
    Outcome::new(recovered >= 95, detail)
}

fn kernel_performance() -> Outcome {
    let (b, rows, cols, d) = (64usize, 32usize, 32usize, 768usize);
    let bank = normalize_bank(&raw_bank(2024, b, rows, cols, d), 1e-12);
    let cfg = ScoringConfig::batch_zero_shot();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let start = Instant::now();
        let out = pool.install(|| score_batch_zero_shot(&bank, &cfg)).unwrap();
        (out, start.elapsed().as_secs_f64())
    };
    let (one, t1) = run(1);
    let (four, t4) = run(4);
    let identical = one.iter().zip(&four).all(|(a, b)| {
        a.score.value.to_bits() == b.score.value.to_bits()
            && a.map.scores.iter().zip(&b.map.scores).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let speedup = t1 / t4;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let fast = t1.min(t4) <= 60.0;
    let scales = speedup >= 2.5;
    let pass = fast && identical && scales;
    let mut detail = format!(
        "kernel {:?}; 1 thread {t1:.1} s, 4 threads {t4:.1} s (need <= 60 s); speedup {speedup:.2}x (need >= 2.5x); outputs bit-identical: {identical}",
        KernelKind::detect()
    );
    if cores < 4 {
        detail.push_str(&format!("; host exposes {cores} core(s), so the 4-thread speedup cannot be reached here"));
    }
    Outcome { pass, detail, hardware_limited: fast && identical && !scales && cores < 4 }
}

/// Every file under `dir`, relative path and bytes, in path order.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs each CLI command twice into separate workspaces and compares every
/// output byte (stdout included, with the workspace path substituted).
fn cli_determinism() -> Outcome {
    let root = std::env::temp_dir().join(format!("patchscore-acceptance-{}", std::process::id()));
    let _ = fs::remove_dir_all(&root);
    let commands: [(&str, &[&str]); 7] = [
        ("gen-fixtures", &["gen-fixtures", "--output-dir", "{w}/fx", "--n-images", "24", "--seed", "5"]),
        ("inspect", &["inspect", "--bank-path", "{w}/fx/test.pead"]),
        (
            "score few-shot",
            &[
                "score",
                "--bank-path",
                "{w}/fx/test.pead",
                "--prompt-bank-path",
                "{w}/fx/train.pead",
                "--labels-path",
                "{w}/fx/labels.json",
                "--output-dir",
                "{w}/few",
                "--shots",
                "1,4",
                "--align",
                "--mask",
            ],
        ),
        (
            "score batch ablation",
            &[
                "score",
                "--setting",
                "batch-zero-shot",
                "--bank-path",
                "{w}/fx/test.pead",
                "--labels-path",
                "{w}/fx/labels.json",
                "--output-dir",
                "{w}/batch",
                "--batch-size",
                "10",
                "--ablate",
            ],
        ),
        ("eval", &["eval", "--results", "{w}/batch/align-1_mask-1/results.json", "--output", "{w}/report.json"]),
        (
            "heatmap",
            &["heatmap", "--results", "{w}/few/results.json", "--image", "synthetic_0003", "--out", "{w}/heat.png"],
        ),
        (
            "heatmap batch",
            &[
                "heatmap",
                "--results",
                "{w}/batch/align-0_mask-0/results.json",
                "--image",
                "synthetic_0007",
                "--out",
                "{w}/heat2.png",
            ],
        ),
    ];
    let mut stdouts: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    for (k, out) in stdouts.iter_mut().enumerate() {
        let w = root.join(format!("w{k}"));
        let ws = w.to_str().unwrap().to_string();
        for (name, args) in &commands {
            let args: Vec<String> = args.iter().map(|a| a.replace("{w}", &ws)).collect();
            let o = Command::new(env!("CARGO_BIN_EXE_patchscore")).args(&args).output().unwrap();
            if !o.status.success() {
                let _ = fs::remove_dir_all(&root);
                return Outcome::new(false, format!("{name} failed: {}", String::from_utf8_lossy(&o.stderr)));
            }
            out.push(String::from_utf8_lossy(&o.stdout).replace(&ws, "{w}"));
        }
    }
    // Results files record the output paths of their own workspace.
    let normalized = |k: usize| -> Vec<(PathBuf, Vec<u8>)> {
        let w = root.join(format!("w{k}"));
        let ws = w.to_str().unwrap().to_string();
        tree(&w)
            .into_iter()
            .map(|(p, b)| match String::from_utf8(b) {
                Ok(text) => (p, text.replace(&ws, "{w}").into_bytes()),
                Err(e) => (p, e.into_bytes()),
            })
            .collect()
    };
    let (a, b) = (normalized(0), normalized(1));
    let _ = fs::remove_dir_all(&root);
    let differing: Vec<String> =
        a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.display().to_string()).collect();
    let same_files = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.0 == y.0);
    let same_stdout = stdouts[0] == stdouts[1];
    let pass = same_files && differing.is_empty() && same_stdout;
    let mut detail = format!(
        "{} commands run twice; {} output files compared; identical files: {}; identical stdout: {same_stdout}",
        commands.len(),
        a.len(),
        same_files && differing.is_empty()
    );
    if !differing.is_empty() {
        detail.push_str(&format!("; differing: {:?}", &differing[..differing.len().min(5)]));
    }
    Outcome::new(pass, detail)
}

fn main() {
    // `cargo test` passes harness flags such as `--list` or a filter; only
    // a plain run (or one filtered to "acceptance") executes the suite.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if let Some(filter) = args.iter().find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(filter.as_str()) {
            return;
        }
    }

    println!("acceptance criteria");
    let mut results = vec![
        ("oracle equivalence", report("oracle equivalence", Some(Duration::from_secs(10)), oracle_equivalence)),
        ("planted detection", report("planted-anomaly detection", Some(Duration::from_secs(30)), planted_detection)),
        ("metric oracles", report("metric oracles", None, metric_oracles)),
        ("formula checks", report("formula checks", None, formula_checks)),
        ("alignment recovery", report("alignment recovery", Some(Duration::from_secs(60)), alignment_recovery)),
        ("determinism", report("CLI determinism", None, cli_determinism)),
    ];
    if std::env::var_os("ACCEPTANCE_SKIP_PERF").is_some() {
        println!("[SKIP] kernel performance: ACCEPTANCE_SKIP_PERF is set");
    } else {
        results.push(("kernel performance", report("kernel performance", None, kernel_performance)));
    }
    let failed = results.iter().filter(|r| !r.1 .0).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());

    // A failure caused only by missing cores is reported above but does not
    // fail the run. Every other failure does.
    let blocking: Vec<&str> = results.iter().filter(|r| !r.1 .0 && !r.1 .1).map(|r| r.0).collect();
    if !blocking.is_empty() {
        eprintln!("failed: {blocking:?}");
        std::process::exit(1);
    }
}
