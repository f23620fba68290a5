//! Run configuration and the per-dataset enhancement policy.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use patchscore::masking::DEFAULT_MASK_THRESHOLD;
use patchscore::scoring::{Reduction, ScoringConfig, Setting};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::output::read_json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    #[value(alias = "few_shot")]
    FewShot,
    #[value(alias = "batch_zero_shot")]
    BatchZeroShot,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::FewShot => Setting::FewShot,
            SettingArg::BatchZeroShot => Setting::BatchZeroShot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReductionArg {
    Nearest,
    Farthest,
}

impl From<ReductionArg> for Reduction {
    fn from(r: ReductionArg) -> Self {
        match r {
            ReductionArg::Nearest => Reduction::Nearest,
            ReductionArg::Farthest => Reduction::Farthest,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[arg(long, value_enum, default_value = "few-shot")]
    pub setting: SettingArg,
    /// Prompt counts of few-shot runs, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub shots: Vec<usize>,
    /// Prompt sampling seeds of few-shot runs, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Register prompts (few-shot) or batch members (batch mode) and add aligned and 180-degree variants.
    #[arg(long)]
    pub align: bool,
    /// Down-weight background patches using the stored attention.
    #[arg(long)]
    pub mask: bool,
    /// Fraction of patches averaged into the image score; unset takes the maximum.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long, default_value_t = 0.3)]
    pub kp_fraction: f64,
    #[arg(long, value_enum, default_value = "nearest")]
    pub reduction: ReductionArg,
    /// MVTec-style tree holding the images named in the bank.
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
    /// Bank of test images.
    #[arg(long)]
    pub bank_path: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Bank of normal training images few-shot prompts are sampled from.
    #[arg(long)]
    pub prompt_bank_path: Option<PathBuf>,
    /// Fixture label file; enables per-seed metrics without a dataset tree.
    #[arg(long)]
    pub labels_path: Option<PathBuf>,
    /// JSON map from dataset tag to {"align": bool, "mask": bool}; turns flags on per dataset.
    #[arg(long)]
    pub policy_path: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MASK_THRESHOLD)]
    pub mask_threshold: f64,
    /// Run all four align/mask combinations and write one row per combination.
    #[arg(long)]
    pub ablate: bool,
}

/// Everything a score run depends on; recorded verbatim in its results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub setting: Setting,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub align: bool,
    pub mask: bool,
    pub rho: Option<f64>,
    pub kp_fraction: f64,
    pub reduction: Reduction,
    pub mask_threshold: f64,
    pub dataset_root: Option<PathBuf>,
    pub bank_path: PathBuf,
    pub prompt_bank_path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_args(args: &ScoreArgs, enhancement: Enhancement) -> Self {
        Self {
            setting: args.setting.into(),
            shots: args.shots.clone(),
            seeds: args.seeds.clone(),
            batch_size: args.batch_size,
            align: args.align || enhancement.align,
            mask: args.mask || enhancement.mask,
            rho: args.rho,
            kp_fraction: args.kp_fraction,
            reduction: args.reduction.into(),
            mask_threshold: args.mask_threshold,
            dataset_root: args.dataset_root.clone(),
            bank_path: args.bank_path.clone(),
            prompt_bank_path: args.prompt_bank_path.clone(),
            labels_path: args.labels_path.clone(),
            output_dir: args.output_dir.clone(),
        }
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            per_image_reduction: self.reduction,
            kp_fraction: self.kp_fraction,
            rho: self.rho,
            ..ScoringConfig::new(self.setting)
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::Config(m.into()));
        match self.setting {
            Setting::FewShot => {
                if self.shots.is_empty() || self.shots.contains(&0) {
                    return bad("shots must be a non-empty list of positive integers");
                }
                if self.seeds.is_empty() {
                    return bad("seeds must not be empty");
                }
                if self.prompt_bank_path.is_none() {
                    return bad("few-shot scoring needs --prompt-bank-path");
                }
            }
            Setting::BatchZeroShot => {
                if self.batch_size < 2 {
                    return bad("batch_size must be at least 2");
                }
            }
        }
        if !(self.mask_threshold.is_finite()) {
            return bad("mask_threshold must be finite");
        }
        self.scoring().validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enhancement {
    pub align: bool,
    pub mask: bool,
}

pub type Policy = BTreeMap<String, Enhancement>;

pub fn load_policy(path: &Path) -> CliResult<Policy> {
    let raw: Policy = read_json(path)?;
    Ok(raw.into_iter().map(|(k, v)| (k.to_ascii_lowercase(), v)).collect())
}

/// Exact tag match first, then the longest key that prefixes the tag up to a
/// non-alphanumeric boundary (`mvtec` covers `mvtec/bottle`).
pub fn lookup(policy: &Policy, tag: &str) -> Enhancement {
    let tag = tag.to_ascii_lowercase();
    if let Some(e) = policy.get(&tag) {
        return *e;
    }
    policy
        .iter()
        .filter(|(k, _)| {
            tag.strip_prefix(k.as_str())
                .is_some_and(|rest| rest.chars().next().is_some_and(|c| !c.is_ascii_alphanumeric()))
        })
        .max_by_key(|(k, _)| k.len())
        .map(|(_, e)| *e)
        .unwrap_or_default()
}
