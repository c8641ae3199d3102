use std::collections::BTreeMap;

use alignlite::eval::{self, UtilityReport};
use alignlite::rng::child_seed;
use alignlite::store::PairedDataset;
use alignlite::train::{self, init_model, TrainConfig};
use anyhow::anyhow;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{take_subset, test_set, training_set, validation_set};
use crate::config::ExperimentConfig;
use crate::output::{ensure_dir, write_csv, write_json};
use crate::{eval_failure, train_failure, CmdResult, Failure};

pub const BASELINE: &str = "baseline";
pub const REGULARIZED: &str = "regularized";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub size: usize,
    pub condition: String,
    pub repeat: usize,
    pub seed: u64,
    pub lambda: f64,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub test_r1: f64,
}

#[derive(Debug, Serialize)]
pub struct UtilityOutput {
    /// Mean test R@1 per size for each condition.
    pub baseline: Vec<(usize, f64)>,
    pub regularized: Vec<(usize, f64)>,
    pub utility: Option<UtilityReport>,
    pub error: Option<String>,
}

pub struct SweepOutcome {
    pub rows: Vec<CurveRow>,
    pub utility: UtilityOutput,
}

struct Job {
    size: usize,
    condition: &'static str,
    repeat: usize,
}

fn check_sizes(sizes: &[usize], n: usize) -> CmdResult<()> {
    if sizes.is_empty() {
        return Err(Failure::input("sweep.sizes is empty"));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Failure::input(format!("sweep sizes must be strictly ascending, got {sizes:?}")));
    }
    if sizes[0] < 2 || *sizes.last().unwrap() > n {
        return Err(Failure::input(format!(
            "sweep sizes must lie in [2, {n}] for {n} training pairs, got {sizes:?}"
        )));
    }
    Ok(())
}

fn run_job(
    job: &Job,
    cfg: &ExperimentConfig,
    pool: &PairedDataset,
    val: Option<&PairedDataset>,
    test: &PairedDataset,
    root: u64,
) -> CmdResult<CurveRow> {
    let seed = child_seed(root, job.repeat as u64);
    let subset = take_subset(pool, job.size, seed)?;
    let lambda = if job.condition == BASELINE { 0.0 } else { cfg.train.lambda };
    let tc = TrainConfig {
        lambda,
        seed,
        ..cfg.train.clone()
    };
    let (d1, d2) = pool.dims();
    let init = init_model(cfg.model.kind, d1, d2, cfg.model.k, seed);
    let val = val.unwrap_or(&subset);
    let (model, history) = train::train(&subset, val, &init, &tc).map_err(train_failure)?;
    let za = model.embed_a(test.a().data().view());
    let zb = model.embed_b(test.b().data().view());
    let test_r1 = eval::mean_r1(za.view(), zb.view()).map_err(eval_failure)?;
    log::info!(
        "size {} {} repeat {}: test R@1 {test_r1:.4}",
        job.size,
        job.condition,
        job.repeat
    );
    Ok(CurveRow {
        size: job.size,
        condition: job.condition.into(),
        repeat: job.repeat,
        seed,
        lambda,
        epochs_run: history.records.len(),
        best_epoch: history.best_epoch,
        test_r1,
    })
}

fn mean_curve(rows: &[CurveRow], condition: &str) -> Vec<(usize, f64)> {
    let mut by_size: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.condition == condition) {
        by_size.entry(r.size).or_default().push(r.test_r1);
    }
    by_size
        .into_iter()
        .map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64))
        .collect()
}

pub fn run(cfg: &ExperimentConfig, threads: usize) -> CmdResult<SweepOutcome> {
    let root = cfg.seed()?;
    let out = cfg.out_dir()?;
    let pool = training_set(cfg)?;
    let test = test_set(cfg)?;
    if test.dims() != pool.dims() {
        return Err(Failure::input(format!(
            "test dims {:?} differ from training dims {:?}",
            test.dims(),
            pool.dims()
        )));
    }
    let has_val = cfg.data.val_a.is_some();
    let val = if has_val { Some(validation_set(cfg, &pool)?) } else { None };
    let sizes = &cfg.sweep.sizes;
    check_sizes(sizes, pool.len())?;
    if cfg.sweep.repeats == 0 {
        return Err(Failure::input("sweep.repeats must be at least 1"));
    }
    let mut jobs = Vec::new();
    for &size in sizes {
        for condition in [BASELINE, REGULARIZED] {
            for repeat in 0..cfg.sweep.repeats {
                jobs.push(Job { size, condition, repeat });
            }
        }
    }
    let workers = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Failure::Input(anyhow!("thread pool: {e}")))?;
    let rows: Vec<CurveRow> = workers.install(|| {
        jobs.par_iter()
            .map(|j| run_job(j, cfg, &pool, val.as_ref(), &test, root))
            .collect::<CmdResult<Vec<_>>>()
    })?;

    let baseline = mean_curve(&rows, BASELINE);
    let regularized = mean_curve(&rows, REGULARIZED);
    let as_f = |c: &[(usize, f64)]| c.iter().map(|&(n, m)| (n as f64, m)).collect::<Vec<_>>();
    let (utility, error) = match eval::utility(&as_f(&regularized), &as_f(&baseline)) {
        Ok(u) => (Some(u), None),
        Err(e) => {
            log::warn!("utility: {e}");
            (None, Some(e.to_string()))
        }
    };
    let utility = UtilityOutput {
        baseline,
        regularized,
        utility,
        error,
    };
    ensure_dir(out)?;
    write_csv(&out.join("curve.csv"), &rows)?;
    write_json(&out.join("utility.json"), &utility)?;
    Ok(SweepOutcome { rows, utility })
}
