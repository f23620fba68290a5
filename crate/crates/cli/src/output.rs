//! On-disk schemas of the CLI and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use patchscore::store::Grid;
use patchscore::PatchScoreMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{at, CliError, CliResult};

/// Writes through a sibling temporary file and a rename, so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        at(dir, fs::create_dir_all(dir))?;
    }
    let tmp = temp_sibling(path);
    at(&tmp, fs::write(&tmp, bytes))?;
    at(path, fs::rename(&tmp, path))
}

/// `.<name>.tmp.<ext>` next to `path`; keeps the extension for writers that
/// pick a format from it.
pub fn temp_sibling(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!(".{stem}.tmp.{}", ext.to_string_lossy()),
        None => format!(".{stem}.tmp"),
    };
    path.with_file_name(name)
}

/// Prints a line to stdout; a closed pipe is not an error.
pub fn emit(line: &str) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{line}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = at(path, fs::read(path))?;
    at(path, serde_json::from_slice(&bytes))
}

/// One patch score map on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    pub name: String,
    /// `(width, height)` of the image the grid covers.
    pub image_size: (usize, usize),
    pub grid: Grid,
    pub scores: Vec<f32>,
}

impl MapFile {
    pub fn to_score_map(&self) -> CliResult<PatchScoreMap> {
        if self.scores.len() != self.grid.len() {
            return Err(CliError::Data(format!(
                "map of {} holds {} scores for a {}x{} grid",
                self.name,
                self.scores.len(),
                self.grid.rows,
                self.grid.cols
            )));
        }
        Ok(PatchScoreMap { scores: self.scores.clone(), grid: self.grid, query_name: self.name.clone() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub name: String,
    pub score: f64,
    /// Relative to the directory holding the results file.
    pub map_path: String,
    pub seed: Option<u64>,
    pub shots: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub shots: Option<usize>,
    pub seed: Option<u64>,
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    /// Patch-level AUROC against fixture patch labels.
    pub patch_auroc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
}

impl MeanStd {
    /// `None` when any value is missing or there are none.
    pub fn of(values: &[Option<f64>]) -> Option<Self> {
        let v: Vec<f64> = values.iter().copied().collect::<Option<_>>()?;
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub shots: Option<usize>,
    pub n_seeds: usize,
    pub image_auroc: Option<MeanStd>,
    pub image_ap: Option<MeanStd>,
    pub patch_auroc: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub config: RunConfig,
    pub per_image: Vec<ImageEntry>,
    pub per_seed_metrics: Vec<SeedMetrics>,
    pub aggregate: Vec<Aggregate>,
}

impl ResultsFile {
    /// Entries of one run. Unset selectors default to the run of the first entry.
    pub fn select_run(&self, seed: Option<u64>, shots: Option<usize>) -> CliResult<Vec<&ImageEntry>> {
        let first = self.per_image.first().ok_or_else(|| CliError::Data("results hold no images".into()))?;
        let seed = seed.or(first.seed);
        let shots = shots.or(first.shots);
        let run: Vec<&ImageEntry> = self.per_image.iter().filter(|e| e.seed == seed && e.shots == shots).collect();
        if run.is_empty() {
            return Err(CliError::Config(format!("no run with seed {seed:?} and shots {shots:?}")));
        }
        Ok(run)
    }
}

/// One row per flag combination of an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub align: bool,
    pub mask: bool,
    pub results_path: String,
    pub aggregate: Vec<Aggregate>,
}
