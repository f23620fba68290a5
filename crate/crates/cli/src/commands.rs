//! `eval`, `heatmap`, `gen-fixtures` and `inspect`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use patchscore::anomaly_map::{load_mask, DEFAULT_SIGMA};
use patchscore::dataset::{discover, image_dimensions};
use patchscore::fixtures::{gen_synthetic_train, FixtureLabels};
use patchscore::metrics::evaluate_category;
use patchscore::{
    gen_synthetic, read_bank, render_heatmap, to_pixel_map, BinaryMask, EvalReport, Normalization, PixelAnomalyMap,
    SyntheticSpec,
};
use serde::Serialize;

use crate::error::{at, CliError, CliResult};
use crate::output::{emit, read_json, temp_sibling, write_atomic, write_json, ImageEntry, MapFile, ResultsFile};

pub const FIXTURE_CATEGORY: &str = "synthetic";

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// results.json written by `score`.
    #[arg(long)]
    pub results: PathBuf,
    /// MVTec-style ground truth; defaults to the dataset root of the run.
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
    /// Fixture label file; defaults to the label file of the run.
    #[arg(long)]
    pub labels_path: Option<PathBuf>,
    /// Where to write the report; it is always printed.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Run to evaluate; defaults to the run of the first entry.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Gaussian smoothing of the upsampled maps, in pixels.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
}

#[derive(Debug, Clone, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub results: PathBuf,
    /// Image name as listed in the results.
    #[arg(long)]
    pub image: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
}

#[derive(Debug, Clone, Args)]
pub struct GenFixturesArgs {
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub n_images: usize,
    /// Patch grid as ROWSxCOLS.
    #[arg(long, default_value = "8x8", value_parser = parse_grid)]
    pub grid: (usize, usize),
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 0.25)]
    pub anomaly_rate: f64,
    #[arg(long, default_value_t = 6)]
    pub anomaly_patch_count: usize,
    /// Angle in radians between the normal and planted cluster centers.
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_3)]
    pub cluster_separation: f64,
    #[arg(long, default_value_t = 0.05)]
    pub jitter: f64,
    /// Images in the normal-only training bank.
    #[arg(long, default_value_t = 16)]
    pub n_train: usize,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub bank_path: PathBuf,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(r)?, parse(c)?))
}

fn results_dir(results: &Path) -> &Path {
    results.parent().unwrap_or(Path::new(""))
}

fn load_map(results: &Path, entry: &ImageEntry) -> CliResult<MapFile> {
    read_json(&results_dir(results).join(&entry.map_path))
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    emit(&serde_json::to_string_pretty(value)?)
}

fn eval_fixture(results: &Path, run: &[&ImageEntry], labels: &FixtureLabels) -> CliResult<EvalReport> {
    let mut scores = Vec::with_capacity(run.len());
    let mut truth = Vec::with_capacity(run.len());
    let mut maps = Vec::with_capacity(run.len());
    let mut masks = Vec::with_capacity(run.len());
    for e in run {
        let i = labels
            .image_names
            .iter()
            .position(|n| *n == e.name)
            .ok_or_else(|| CliError::Data(format!("no label for {}", e.name)))?;
        let map = load_map(results, e)?;
        if map.grid.rows != labels.grid.0 || map.grid.cols != labels.grid.1 {
            return Err(CliError::Data(format!("map grid of {} differs from the label grid", e.name)));
        }
        scores.push(e.score);
        truth.push(labels.image_labels[i] != 0);
        maps.push(PixelAnomalyMap {
            width: map.grid.cols,
            height: map.grid.rows,
            values: map.scores,
            source_query: e.name.clone(),
        });
        masks.push(BinaryMask { width: labels.grid.1, height: labels.grid.0, data: labels.pixel_labels[i].clone() });
    }
    let metrics = evaluate_category(FIXTURE_CATEGORY, &scores, &truth, Some((&maps, &masks)))?;
    Ok(EvalReport::from_categories(vec![metrics]))
}

fn eval_dataset(results: &Path, run: &[&ImageEntry], root: &Path, sigma: f64) -> CliResult<EvalReport> {
    let categories = at(root, discover(root))?;
    let mut assigned = vec![false; run.len()];
    let mut per_category = Vec::new();
    for cat in &categories {
        let mut scores = Vec::new();
        let mut truth = Vec::new();
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for (k, e) in run.iter().enumerate() {
            let Some(sample) = cat.find(&e.name) else { continue };
            assigned[k] = true;
            let map = load_map(results, e)?.to_score_map()?;
            let mask = match &sample.mask_path {
                Some(p) => at(p, load_mask(p))?,
                None => {
                    let (w, h) = at(&sample.path, image_dimensions(&sample.path))?;
                    BinaryMask::empty(w, h)
                }
            };
            maps.push(to_pixel_map(&map, (mask.width, mask.height), sigma)?);
            masks.push(mask);
            scores.push(e.score);
            truth.push(sample.anomalous);
        }
        if !scores.is_empty() {
            per_category.push(evaluate_category(&cat.name, &scores, &truth, Some((&maps, &masks)))?);
        }
    }
    if let Some(k) = assigned.iter().position(|a| !a) {
        return Err(CliError::Data(format!("{} is not a test image under {}", run[k].name, root.display())));
    }
    Ok(EvalReport::from_categories(per_category))
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let results: ResultsFile = read_json(&args.results)?;
    let run = results.select_run(args.seed, args.shots)?;
    // Explicit flags first, then the ground truth the run itself used.
    let (labels_path, root) = match (&args.labels_path, &args.dataset_root) {
        (None, None) => (results.config.labels_path.clone(), results.config.dataset_root.clone()),
        (l, r) => (l.clone(), r.clone()),
    };
    let report = match (labels_path, root) {
        (Some(p), _) => eval_fixture(&args.results, &run, &read_json(&p)?)?,
        (None, Some(root)) => eval_dataset(&args.results, &run, &root, args.sigma)?,
        (None, None) => return Err(CliError::Config("eval needs --dataset-root or --labels-path".into())),
    };
    if let Some(out) = &args.output {
        write_json(out, &report)?;
    }
    print_json(&report)
}

pub fn cmd_heatmap(args: &HeatmapArgs) -> CliResult<()> {
    let results: ResultsFile = read_json(&args.results)?;
    let run = results.select_run(args.seed, args.shots)?;
    let entry = run
        .iter()
        .find(|e| e.name == args.image)
        .ok_or_else(|| CliError::Config(format!("image {:?} is not in the selected run", args.image)))?;
    let file = load_map(&args.results, entry)?;
    let pixel = to_pixel_map(&file.to_score_map()?, file.image_size, args.sigma)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        at(dir, fs::create_dir_all(dir))?;
    }
    let tmp = temp_sibling(&args.out);
    at(&tmp, render_heatmap(&pixel, &tmp, Normalization::PerImage))?;
    at(&args.out, fs::rename(&tmp, &args.out))?;
    emit(&args.out.display().to_string())
}

pub const TEST_BANK: &str = "test.pead";
pub const TRAIN_BANK: &str = "train.pead";
pub const LABELS_FILE: &str = "labels.json";
pub const SPEC_FILE: &str = "spec.json";

pub fn cmd_gen_fixtures(args: &GenFixturesArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        seed: args.seed,
        n_images: args.n_images,
        grid: args.grid,
        embed_dim: args.embed_dim,
        anomaly_rate: args.anomaly_rate,
        anomaly_patch_count: args.anomaly_patch_count,
        cluster_separation: args.cluster_separation,
        jitter: args.jitter,
    };
    let fixture = gen_synthetic(&spec)?;
    let train = gen_synthetic_train(&spec, args.n_train)?;
    let dir = &args.output_dir;
    write_atomic(&dir.join(TEST_BANK), &fixture.bank.to_bytes()?)?;
    write_atomic(&dir.join(TRAIN_BANK), &train.to_bytes()?)?;
    write_json(&dir.join(LABELS_FILE), &fixture.labels())?;
    write_json(&dir.join(SPEC_FILE), &spec)?;
    emit(&dir.display().to_string())
}

#[derive(Serialize)]
struct BankSummary<'a> {
    path: &'a Path,
    file_bytes: u64,
    n_images: usize,
    n_patches: usize,
    embed_dim: usize,
    metadata: &'a patchscore::StoreMetadata,
}

pub fn cmd_inspect(args: &InspectArgs) -> CliResult<()> {
    let bank = at(&args.bank_path, read_bank(&args.bank_path))?;
    let file_bytes = at(&args.bank_path, fs::metadata(&args.bank_path))?.len();
    print_json(&BankSummary {
        path: &args.bank_path,
        file_bytes,
        n_images: bank.n_images(),
        n_patches: bank.n_patches(),
        embed_dim: bank.dim(),
        metadata: &bank.meta,
    })
}
