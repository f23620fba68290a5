//! The `score` command: prompt sampling, batching, enhancement flags, and
//! results/map output.

use std::ops::Range;
use std::path::{Path, PathBuf};

use patchscore::alignment::{default_angle_grid, warp_bank_images, warp_score_map};
use patchscore::dataset::{discover, Category};
use patchscore::fixtures::FixtureLabels;
use patchscore::scoring::{ScoringConfig, Setting};
use patchscore::store::NormalizedBank;
use patchscore::{
    apply_mask, attention_to_mask, auroc, average_precision, average_variant_scores, estimate_rigid, image_score,
    normalize_bank, read_bank, score_batch_zero_shot, score_few_shot, GrayImage, PatchScoreMap, RigidTransform,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{load_policy, lookup, Enhancement, RunConfig, ScoreArgs};
use crate::error::{at, CliError, CliResult};
use crate::output::{emit, write_json, AblationRow, Aggregate, ImageEntry, MapFile, MeanStd, ResultsFile, SeedMetrics};

pub const RESULTS_FILE: &str = "results.json";
pub const ABLATION_FILE: &str = "ablation.json";

/// Consecutive batches of `size`; a trailing batch of fewer than 2 images
/// joins the previous one.
pub fn partition_batches(n: usize, size: usize) -> CliResult<Vec<Range<usize>>> {
    if size < 2 {
        return Err(CliError::Config(format!("batch_size {size} must be at least 2")));
    }
    if n < 2 {
        return Err(CliError::Data(format!("batch scoring needs at least 2 images, got {n}")));
    }
    let mut out: Vec<Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().end = tail.end;
    }
    Ok(out)
}

/// Uniform sample of `k` distinct prompt indices, sorted.
pub fn sample_prompts(n: usize, k: usize, seed: u64) -> CliResult<Vec<usize>> {
    if k > n {
        return Err(CliError::Config(format!("{k} shots requested but the prompt bank holds {n} images")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Ground truth available to a score run.
enum Labels {
    Fixture(FixtureLabels),
    Dataset(Vec<Category>),
}

impl Labels {
    fn load(cfg: &RunConfig) -> CliResult<Option<Self>> {
        if let Some(p) = &cfg.labels_path {
            return Ok(Some(Labels::Fixture(crate::output::read_json(p)?)));
        }
        match &cfg.dataset_root {
            Some(root) => Ok(Some(Labels::Dataset(at(root, discover(root))?))),
            None => Ok(None),
        }
    }

    fn image(&self, name: &str) -> Option<bool> {
        match self {
            Labels::Fixture(f) => f.image_names.iter().position(|n| n == name).map(|i| f.image_labels[i] != 0),
            Labels::Dataset(cats) => cats.iter().find_map(|c| c.find(name)).map(|s| s.anomalous),
        }
    }

    fn patches(&self, name: &str) -> Option<&[u8]> {
        match self {
            Labels::Fixture(f) => f.image_names.iter().position(|n| n == name).map(|i| f.pixel_labels[i].as_slice()),
            Labels::Dataset(_) => None,
        }
    }
}

/// Grayscale source for registration: the dataset image when it exists,
/// otherwise the stored attention map as a rows x cols proxy.
fn registration_image(cfg: &RunConfig, bank: &NormalizedBank, i: usize) -> CliResult<GrayImage> {
    let name = bank.name(i);
    if let Some(root) = &cfg.dataset_root {
        let path = root.join(name);
        if path.is_file() {
            return at(&path, GrayImage::load(&path));
        }
    }
    match bank.attention_row(i) {
        Some(row) => Ok(GrayImage::new(bank.grid().cols, bank.grid().rows, row.to_vec())?),
        None => Err(CliError::Data(format!(
            "alignment needs an image for {name}: it is not under the dataset root and the bank stores no attention"
        ))),
    }
}

fn registration_images(cfg: &RunConfig, bank: &NormalizedBank) -> CliResult<Vec<GrayImage>> {
    (0..bank.n_images()).map(|i| registration_image(cfg, bank, i)).collect()
}

/// Transform in grid cells with `warp(moving, t) ≈ reference`.
fn register(
    reference: &GrayImage,
    moving: &GrayImage,
    bank: &NormalizedBank,
    angles: &[f64],
) -> CliResult<RigidTransform> {
    let t = estimate_rigid(reference, moving, angles)?;
    Ok(t.to_patch_units((moving.width, moving.height), bank.grid()))
}

fn with_half_turn(ts: &[RigidTransform]) -> Vec<RigidTransform> {
    ts.iter().map(|t| t.then(&RigidTransform::rotation(180.0))).collect()
}

/// Applies the attention mask (when enabled) and recomputes the image score.
fn finish(
    map: PatchScoreMap,
    attention: Option<&[f32]>,
    cfg: &RunConfig,
    sc: &ScoringConfig,
) -> CliResult<(PatchScoreMap, f64)> {
    let map = match (cfg.mask, attention) {
        (false, _) => map,
        (true, Some(row)) => apply_mask(&map, &attention_to_mask(row, cfg.mask_threshold)?)?,
        (true, None) => return Err(CliError::Data("--mask needs a bank with attention".into())),
    };
    let score = image_score(&map, None, sc)?.value;
    Ok((map, score))
}

struct Scored {
    map: PatchScoreMap,
    score: f64,
}

struct Run {
    shots: Option<usize>,
    seed: Option<u64>,
    images: Vec<Scored>,
}

fn few_shot_run(
    cfg: &RunConfig,
    query: &NormalizedBank,
    prompts: &NormalizedBank,
    images: Option<(&[GrayImage], &[GrayImage])>,
    sc: &ScoringConfig,
) -> CliResult<Vec<Scored>> {
    let plain = match images {
        None => Some(score_few_shot(query, prompts, sc)?),
        Some(_) => None,
    };
    let angles = default_angle_grid();
    let mut out = Vec::with_capacity(query.n_images());
    for qi in 0..query.n_images() {
        let raw = match (&plain, images) {
            (Some(all), _) => all[qi].map.clone(),
            (None, Some((qimgs, pimgs))) => {
                let ts =
                    pimgs.iter().map(|p| register(&qimgs[qi], p, prompts, &angles)).collect::<CliResult<Vec<_>>>()?;
                let aligned = warp_bank_images(prompts, &ts)?;
                let turned = warp_bank_images(prompts, &with_half_turn(&ts))?;
                let set = NormalizedBank::concat(&[prompts, &aligned, &turned])?;
                score_few_shot(&query.select(&[qi]), &set, sc)?.remove(0).map
            }
            (None, None) => unreachable!(),
        };
        let (map, score) = finish(raw, query.attention_row(qi), cfg, sc)?;
        out.push(Scored { map, score });
    }
    Ok(out)
}

fn batch_run(
    cfg: &RunConfig,
    query: &NormalizedBank,
    images: Option<&[GrayImage]>,
    sc: &ScoringConfig,
) -> CliResult<Vec<Scored>> {
    let angles = default_angle_grid();
    let mut out = Vec::with_capacity(query.n_images());
    for range in partition_batches(query.n_images(), cfg.batch_size)? {
        let idx: Vec<usize> = range.collect();
        let batch = query.select(&idx);
        let Some(imgs) = images else {
            for (k, s) in score_batch_zero_shot(&batch, sc)?.into_iter().enumerate() {
                let (map, score) = finish(s.map, batch.attention_row(k), cfg, sc)?;
                out.push(Scored { map, score });
            }
            continue;
        };
        let anchor = &imgs[idx[0]];
        let ts = idx.iter().map(|&i| register(anchor, &imgs[i], &batch, &angles)).collect::<CliResult<Vec<_>>>()?;
        let variants = [vec![RigidTransform::identity(); idx.len()], ts.clone(), with_half_turn(&ts)];
        let mut per_image: Vec<Vec<(PatchScoreMap, f64)>> = vec![Vec::with_capacity(3); idx.len()];
        for (v, transforms) in variants.iter().enumerate() {
            let bank = if v == 0 { batch.clone() } else { warp_bank_images(&batch, transforms)? };
            for (k, s) in score_batch_zero_shot(&bank, sc)?.into_iter().enumerate() {
                let map = if v == 0 { s.map } else { warp_score_map(&s.map, &transforms[k].inverse()) };
                per_image[k].push(finish(map, batch.attention_row(k), cfg, sc)?);
            }
        }
        for variants in per_image {
            let scores: Vec<f64> = variants.iter().map(|(_, s)| *s).collect();
            let mut map = variants[0].0.clone();
            for (j, m) in map.scores.iter_mut().enumerate() {
                *m = (variants.iter().map(|(v, _)| f64::from(v.scores[j])).sum::<f64>() / 3.0) as f32;
            }
            out.push(Scored { map, score: average_variant_scores(&scores)? });
        }
    }
    Ok(out)
}

fn run_metrics(run: &Run, labels: Option<&Labels>) -> CliResult<SeedMetrics> {
    let mut m = SeedMetrics { shots: run.shots, seed: run.seed, image_auroc: None, image_ap: None, patch_auroc: None };
    let Some(labels) = labels else { return Ok(m) };
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    let mut patch_scores = Vec::new();
    let mut patch_truth = Vec::new();
    let mut have_patches = true;
    for s in &run.images {
        let name = &s.map.query_name;
        let label = labels.image(name).ok_or_else(|| CliError::Data(format!("no ground truth for {name}")))?;
        scores.push(s.score);
        truth.push(label);
        match labels.patches(name) {
            Some(p) if p.len() == s.map.scores.len() => {
                patch_scores.extend_from_slice(&s.map.scores);
                patch_truth.extend(p.iter().map(|&v| v != 0));
            }
            _ => have_patches = false,
        }
    }
    m.image_auroc = auroc(&scores, &truth).ok();
    m.image_ap = average_precision(&scores, &truth).ok();
    if have_patches {
        m.patch_auroc = auroc(&patch_scores, &patch_truth).ok();
    }
    Ok(m)
}

fn aggregate(metrics: &[SeedMetrics]) -> Vec<Aggregate> {
    let mut groups: Vec<Option<usize>> = Vec::new();
    for m in metrics {
        if !groups.contains(&m.shots) {
            groups.push(m.shots);
        }
    }
    groups
        .into_iter()
        .map(|shots| {
            let g: Vec<&SeedMetrics> = metrics.iter().filter(|m| m.shots == shots).collect();
            let col = |f: fn(&SeedMetrics) -> Option<f64>| MeanStd::of(&g.iter().map(|m| f(m)).collect::<Vec<_>>());
            Aggregate {
                shots,
                n_seeds: g.len(),
                image_auroc: col(|m| m.image_auroc),
                image_ap: col(|m| m.image_ap),
                patch_auroc: col(|m| m.patch_auroc),
            }
        })
        .collect()
}

fn run_tag(run: &Run) -> String {
    match (run.shots, run.seed) {
        (Some(k), Some(s)) => format!("shots{k}_seed{s}"),
        _ => "batch".into(),
    }
}

/// Scores the bank under `cfg` and writes `results.json` plus one map file
/// per image and run under `cfg.output_dir`.
pub fn execute(cfg: &RunConfig) -> CliResult<PathBuf> {
    cfg.validate()?;
    let sc = cfg.scoring();
    let bank = at(&cfg.bank_path, read_bank(&cfg.bank_path))?;
    let query = normalize_bank(&bank, sc.epsilon);
    if cfg.mask && query.attention.is_none() {
        return Err(CliError::Data(format!("{}: --mask needs a bank with attention", cfg.bank_path.display())));
    }
    let labels = Labels::load(cfg)?;
    let query_images = if cfg.align { Some(registration_images(cfg, &query)?) } else { None };

    let mut runs = Vec::new();
    match cfg.setting {
        Setting::FewShot => {
            let path = cfg.prompt_bank_path.as_ref().expect("validated");
            let prompt_bank = normalize_bank(&at(path, read_bank(path))?, sc.epsilon);
            let prompt_images = if cfg.align { Some(registration_images(cfg, &prompt_bank)?) } else { None };
            for &shots in &cfg.shots {
                for &seed in &cfg.seeds {
                    let idx = sample_prompts(prompt_bank.n_images(), shots, seed)?;
                    let prompts = prompt_bank.select(&idx);
                    let chosen: Option<Vec<GrayImage>> =
                        prompt_images.as_ref().map(|p| idx.iter().map(|&i| p[i].clone()).collect());
                    let images = query_images.as_deref().zip(chosen.as_deref());
                    let scored = few_shot_run(cfg, &query, &prompts, images, &sc)?;
                    runs.push(Run { shots: Some(shots), seed: Some(seed), images: scored });
                }
            }
        }
        Setting::BatchZeroShot => {
            let scored = batch_run(cfg, &query, query_images.as_deref(), &sc)?;
            runs.push(Run { shots: None, seed: None, images: scored });
        }
    }

    let image_size = (bank.meta.image_size.0 as usize, bank.meta.image_size.1 as usize);
    let mut per_image = Vec::new();
    let mut per_seed_metrics = Vec::new();
    for run in &runs {
        let tag = run_tag(run);
        for (i, s) in run.images.iter().enumerate() {
            let rel = format!("maps/{tag}/{i:05}.json");
            let file =
                MapFile { name: s.map.query_name.clone(), image_size, grid: s.map.grid, scores: s.map.scores.clone() };
            write_json(&cfg.output_dir.join(&rel), &file)?;
            per_image.push(ImageEntry {
                name: file.name,
                score: s.score,
                map_path: rel,
                seed: run.seed,
                shots: run.shots,
            });
        }
        per_seed_metrics.push(run_metrics(run, labels.as_ref())?);
    }
    let aggregate = aggregate(&per_seed_metrics);
    let results = ResultsFile { config: cfg.clone(), per_image, per_seed_metrics, aggregate };
    let path = cfg.output_dir.join(RESULTS_FILE);
    write_json(&path, &results)?;
    Ok(path)
}

fn relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

pub fn cmd_score(args: &ScoreArgs) -> CliResult<()> {
    let enhancement = match &args.policy_path {
        Some(p) => {
            let bank = at(&args.bank_path, read_bank(&args.bank_path))?;
            lookup(&load_policy(p)?, &bank.meta.dataset_tag)
        }
        None => Enhancement::default(),
    };
    let base = RunConfig::from_args(args, enhancement);
    if !args.ablate {
        return emit(&execute(&base)?.display().to_string());
    }
    let mut rows = Vec::new();
    for (align, mask) in [(false, false), (true, false), (false, true), (true, true)] {
        let dir = base.output_dir.join(format!("align-{}_mask-{}", u8::from(align), u8::from(mask)));
        let cfg = RunConfig { align, mask, output_dir: dir, ..base.clone() };
        let path = execute(&cfg)?;
        let results: ResultsFile = crate::output::read_json(&path)?;
        rows.push(AblationRow {
            align,
            mask,
            results_path: relative(&path, &base.output_dir),
            aggregate: results.aggregate,
        });
    }
    let path = base.output_dir.join(ABLATION_FILE);
    write_json(&path, &rows)?;
    emit(&path.display().to_string())
}
