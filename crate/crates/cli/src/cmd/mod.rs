pub mod eval;
pub mod inspect;
pub mod layer_select;
pub mod report;
pub mod sweep;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use alignlite::store::{self, PairedDataset, SplitSpec};
use anyhow::{anyhow, Context};

use crate::args::{Cli, Command, Common};
use crate::config::ExperimentConfig;
use crate::{CmdResult, Failure};

pub fn dispatch(cli: Cli) -> CmdResult<()> {
    match cli.command {
        Command::Inspect { path } => inspect::run(&path),
        Command::LayerSelect(c) => layer_select::run(&load_config(&c)?),
        Command::Train(c) => train::run(&load_config(&c)?).map(|_| ()),
        Command::Eval { checkpoint, common } => eval::run(&load_config(&common)?, &checkpoint).map(|_| ()),
        Command::Sweep(c) => sweep::run(&load_config(&c)?, cli.threads).map(|_| ()),
        Command::Report { run } => report::run(&run),
        Command::Synth(a) => synth::run(&a),
    }
}

/// Config file (if any) with flag overrides applied and paths checked.
pub fn load_config(common: &Common) -> CmdResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&common.overrides());
    cfg.seed()?;
    cfg.check_paths()?;
    Ok(cfg)
}

fn pair(a: &Option<PathBuf>, b: &Option<PathBuf>) -> Option<(PathBuf, PathBuf)> {
    Some((a.clone()?, b.clone()?))
}

pub fn load_pair(a: &Path, b: &Path) -> CmdResult<PairedDataset> {
    store::load_paired(a, b)
        .with_context(|| format!("loading {} + {}", a.display(), b.display()))
        .map_err(Failure::Input)
}

/// Training pairs: the base set, optionally mixed with extra pairs, then
/// optionally subsampled to `train_count`.
pub fn training_set(cfg: &ExperimentConfig) -> CmdResult<PairedDataset> {
    let (a, b) = pair(&cfg.data.train_a, &cfg.data.train_b)
        .ok_or_else(|| anyhow!("data.train_a and data.train_b are required"))?;
    let mut ds = load_pair(&a, &b)?;
    if let Some((ea, eb)) = pair(&cfg.data.extra_a, &cfg.data.extra_b) {
        let extra = load_pair(&ea, &eb)?;
        ds = store::mix(&ds, &extra).context("mixing extra pairs")?;
    }
    if let Some(count) = cfg.data.train_count {
        ds = take_subset(&ds, count, cfg.seed()?)?;
    }
    Ok(ds)
}

/// Seeded subsample of `count` pairs; the whole set when `count == N`.
pub fn take_subset(ds: &PairedDataset, count: usize, seed: u64) -> CmdResult<PairedDataset> {
    if count == ds.len() {
        return Ok(ds.clone());
    }
    let (kept, _) = store::subsample(ds, &SplitSpec::count(seed, count))
        .with_context(|| format!("subsampling {count} of {} pairs", ds.len()))?;
    Ok(kept)
}

/// Validation pairs, falling back to the training set.
pub fn validation_set(cfg: &ExperimentConfig, train: &PairedDataset) -> CmdResult<PairedDataset> {
    match pair(&cfg.data.val_a, &cfg.data.val_b) {
        Some((a, b)) => load_pair(&a, &b),
        None => {
            log::warn!("no validation set configured; early stopping uses the training pairs");
            Ok(train.clone())
        }
    }
}

/// Held-out test pairs, falling back to the validation set.
pub fn test_set(cfg: &ExperimentConfig) -> CmdResult<PairedDataset> {
    let (a, b) = pair(&cfg.data.test_a, &cfg.data.test_b)
        .or_else(|| pair(&cfg.data.val_a, &cfg.data.val_b))
        .ok_or_else(|| anyhow!("evaluation needs data.test_a/test_b (or data.val_a/val_b)"))?;
    load_pair(&a, &b)
}
