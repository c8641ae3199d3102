//! Alignment models, the combined objective and the deterministic training
//! loop (AdamW, cosine schedule, global-norm clipping, lambda warmup,
//! early stopping on validation retrieval).

pub mod checkpoint;
mod config;
mod lr_finder;
pub mod model;
pub mod objective;
pub mod optim;

pub use config::{LrFinderConfig, LrSetting, RegSubset, TrainConfig};
pub use lr_finder::{lr_range_search, lr_range_test, LrFinderResult};
pub use model::{init_model, AlignmentModel, ModelKind, Projection};
pub use objective::{contrastive_loss, evaluate, LossBreakdown, ObjectiveError, StepInputs};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval;
use crate::store::{permutation, PairedDataset};
use optim::{clip_global_norm, cosine_lr, AdamW};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        term: &'static str,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training set needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("model expects dims {expected:?}, data has {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("invalid lr range: {0}")]
    InvalidLrRange(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub contrastive_loss: f64,
    pub reg_a: f64,
    pub reg_b: f64,
    pub lambda: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Largest global gradient norm after clipping over the epoch's steps.
    pub clipped_norm: f64,
    pub val_r1: f64,
    pub early_stopped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub lr_used: Option<f64>,
    pub steps: usize,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total_loss).collect()
    }

    pub fn stopped_early(&self) -> bool {
        self.records.last().is_some_and(|r| r.early_stopped)
    }
}

/// Mean of image-to-text and text-to-image R@1 after mapping `ds`.
pub fn validation_r1(model: &AlignmentModel, ds: &PairedDataset) -> Result<f64, TrainError> {
    let za = model.embed_a(ds.a().data().view());
    let zb = model.embed_b(ds.b().data().view());
    Ok(eval::mean_r1(za.view(), zb.view())?)
}

/// Row index batches for one epoch. A trailing batch with a single row is
/// folded into the previous one.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    if batch_size >= n {
        return vec![(0..n).collect()];
    }
    let order = permutation(n, crate::rng::child_seed(seed, epoch as u64), "epoch-shuffle");
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(tail);
    }
    batches
}

fn check_dims(model: &AlignmentModel, ds: &PairedDataset) -> Result<(), TrainError> {
    let (d1, d2, _) = model.dims();
    if ds.dims() != (d1, d2) {
        return Err(TrainError::DimensionMismatch {
            expected: (d1, d2),
            found: ds.dims(),
        });
    }
    Ok(())
}

fn fixed_reg_rows(ds: &PairedDataset, cfg: &TrainConfig) -> Option<(Array2<f64>, Array2<f64>)> {
    match cfg.reg_subset {
        RegSubset::Batch => None,
        RegSubset::Fixed(n) => {
            let n = n.min(ds.len());
            let mut idx = permutation(ds.len(), cfg.seed, "reg-subset");
            idx.truncate(n);
            Some((
                ds.a().data().select(Axis(0), &idx),
                ds.b().data().select(Axis(0), &idx),
            ))
        }
    }
}

/// Train `model` on `train`, early-stopping on `val`. Returns the
/// checkpoint with the best validation R@1 (latest on ties).
pub fn train(
    train: &PairedDataset,
    val: &PairedDataset,
    model: &AlignmentModel,
    cfg: &TrainConfig,
) -> Result<(AlignmentModel, TrainHistory), TrainError> {
    cfg.validate().map_err(TrainError::InvalidConfig)?;
    if train.len() < 2 {
        return Err(TrainError::TooFewPairs(train.len()));
    }
    check_dims(model, train)?;
    check_dims(model, val)?;
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((model.clone(), history));
    }

    let lr0 = match cfg.lr {
        LrSetting::Fixed(v) => v,
        LrSetting::Auto => {
            let found = lr_range_test(
                train,
                model,
                cfg,
                cfg.lr_finder.lr_min,
                cfg.lr_finder.lr_max,
                cfg.lr_finder.steps,
            )?;
            if !found.diverged {
                log::warn!("lr range test found no divergence; using {:e}", found.suggested);
            }
            found.suggested
        }
    };
    history.lr_used = Some(lr0);

    let fixed = fixed_reg_rows(train, cfg);
    let mut current = model.clone();
    let shapes: Vec<_> = current.params().iter().map(|p| p.dim()).collect();
    let mut opt = AdamW::new(&shapes, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut best: Option<(f64, AlignmentModel, usize)> = None;
    let mut best_strict = f64::NEG_INFINITY;
    let mut since_improvement = 0usize;
    let mut step = 0usize;
    let (xa, xb) = (train.a().data(), train.b().data());

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(lr0, epoch, cfg.epochs);
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        let mut acc = [0.0f64; 5];
        let mut weight = 0.0;
        let mut lambda = 0.0;
        let mut clipped_norm = 0.0f64;
        for idx in &batches {
            let full = idx.len() == train.len() && batches.len() == 1;
            let (ba, bb) = if full {
                (xa.clone(), xb.clone())
            } else {
                (xa.select(Axis(0), idx), xb.select(Axis(0), idx))
            };
            let mut inputs = StepInputs::batch(ba.view(), bb.view());
            if let Some((fa, fb)) = &fixed {
                inputs.reg_a = Some(fa.view());
                inputs.reg_b = Some(fb.view());
            }
            let mut ev = objective::evaluate(&current, inputs, cfg, step)?;
            for (value, term) in [
                (ev.loss.contrastive, "contrastive loss"),
                (ev.loss.reg_a, "regularizer (modality a)"),
                (ev.loss.reg_b, "regularizer (modality b)"),
                (ev.loss.total, "total loss"),
            ] {
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, step, term });
                }
            }
            let norm = clip_global_norm(&mut ev.grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    term: "gradient",
                });
            }
            clipped_norm = clipped_norm.max(optim::global_norm(&ev.grads));
            opt.step(&mut current.params_mut(), &ev.grads, lr);
            step += 1;
            let w = idx.len() as f64;
            for (slot, v) in acc.iter_mut().zip([
                ev.loss.total,
                ev.loss.contrastive,
                ev.loss.reg_a,
                ev.loss.reg_b,
                norm,
            ]) {
                *slot += w * v;
            }
            weight += w;
            lambda = ev.loss.lambda;
        }
        if !current.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                step,
                term: "parameters",
            });
        }
        let val_r1 = validation_r1(&current, val)?;
        let mut record = EpochRecord {
            epoch,
            total_loss: acc[0] / weight,
            contrastive_loss: acc[1] / weight,
            reg_a: acc[2] / weight,
            reg_b: acc[3] / weight,
            lambda,
            lr,
            grad_norm: acc[4] / weight,
            clipped_norm,
            val_r1,
            early_stopped: false,
        };
        if best.as_ref().is_none_or(|(b, _, _)| val_r1 >= *b) {
            best = Some((val_r1, current.clone(), epoch));
        }
        if val_r1 > best_strict {
            best_strict = val_r1;
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        let stop = cfg.early_stop_patience > 0 && since_improvement >= cfg.early_stop_patience;
        record.early_stopped = stop;
        history.records.push(record);
        if stop {
            break;
        }
    }
    history.steps = step;
    let (_, best_model, best_epoch) = best.expect("at least one epoch ran");
    history.best_epoch = Some(best_epoch);
    Ok((best_model, history))
}
