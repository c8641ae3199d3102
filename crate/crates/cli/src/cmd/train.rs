use std::path::PathBuf;

use alignlite::eval::BoundReport;
use alignlite::train::{self, checkpoint, init_model, AlignmentModel, ModelKind, TrainHistory};
use serde::Serialize;

use super::{training_set, validation_set};
use crate::config::ExperimentConfig;
use crate::output::{ensure_dir, write_csv, write_json};
use crate::{train_failure, CmdResult};

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub kind: ModelKind,
    pub d1: usize,
    pub d2: usize,
    pub k: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
    pub lambda: f64,
    pub levels: usize,
    pub tau: f64,
    pub config_hash: String,
    pub epochs_run: usize,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_val_r1: Option<f64>,
    pub stopped_early: bool,
    pub lr_used: Option<f64>,
    /// Concentration of the regularizer estimate at this training size.
    pub bounds: Option<BoundReport>,
}

pub struct TrainOutcome {
    pub model: AlignmentModel,
    pub history: TrainHistory,
    pub checkpoint: PathBuf,
}

pub fn run(cfg: &ExperimentConfig) -> CmdResult<TrainOutcome> {
    let out = cfg.out_dir()?.to_path_buf();
    let train_ds = training_set(cfg)?;
    let val = validation_set(cfg, &train_ds)?;
    let (d1, d2) = train_ds.dims();
    let tc = &cfg.train;
    let init = init_model(cfg.model.kind, d1, d2, cfg.model.k, tc.seed);
    log::info!(
        "training {:?} model {d1}x{d2} -> {} on {} pairs (lambda={}, L={}, tau={})",
        cfg.model.kind,
        cfg.model.k,
        train_ds.len(),
        tc.lambda,
        tc.reg.levels,
        tc.reg.tau
    );
    let (model, history) = train::train(&train_ds, &val, &init, tc).map_err(train_failure)?;

    ensure_dir(&out)?;
    let ckpt = out.join("model.ckpt");
    checkpoint::save(&ckpt, &model, tc)?;
    write_csv(&out.join("history.csv"), &history.records)?;
    let summary = TrainSummary {
        kind: cfg.model.kind,
        d1,
        d2,
        k: cfg.model.k,
        n_train: train_ds.len(),
        n_val: val.len(),
        seed: tc.seed,
        lambda: tc.lambda,
        levels: tc.reg.levels,
        tau: tc.reg.tau,
        config_hash: tc.config_hash(),
        epochs_run: history.records.len(),
        steps: history.steps,
        best_epoch: history.best_epoch,
        best_val_r1: history.best_epoch.map(|e| history.records[e].val_r1),
        stopped_early: history.stopped_early(),
        lr_used: history.lr_used,
        bounds: BoundReport::new(train_ds.len(), cfg.eval.confidence).ok(),
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    Ok(TrainOutcome {
        model,
        history,
        checkpoint: ckpt,
    })
}
