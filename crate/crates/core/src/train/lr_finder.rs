//! Learning-rate range test: sweep the rate exponentially while taking
//! optimizer steps on a throwaway copy of the parameters, and report the
//! rate one decade below the point where the loss blows up.

use ndarray::{Array2, Axis};

use super::objective::{evaluate_with_lambda, StepInputs};
use super::optim::{clip_global_norm, AdamW};
use super::{AlignmentModel, TrainConfig, TrainError};
use crate::store::{permutation, PairedDataset};

/// Loss is considered diverged once it exceeds this multiple of the
/// running minimum.
pub const DIVERGENCE_FACTOR: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LrFinderResult {
    pub suggested: f64,
    /// False when no divergence was seen; `suggested` is then `lr_max / 10`.
    pub diverged: bool,
    pub lrs: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Range test over an arbitrary objective. `loss_grad` returns the loss and
/// the gradient of every parameter at the given parameters.
pub fn lr_range_search<F>(
    mut params: Vec<Array2<f64>>,
    mut loss_grad: F,
    optimizer: &TrainConfig,
    lr_min: f64,
    lr_max: f64,
    steps: usize,
) -> Result<LrFinderResult, TrainError>
where
    F: FnMut(&[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>), TrainError>,
{
    if !(lr_min > 0.0 && lr_min < lr_max && lr_max.is_finite()) {
        return Err(TrainError::InvalidLrRange(format!(
            "need 0 < lr_min < lr_max, got [{lr_min}, {lr_max}]"
        )));
    }
    if steps < 10 {
        return Err(TrainError::InvalidLrRange(format!("need >= 10 steps, got {steps}")));
    }
    let shapes: Vec<_> = params.iter().map(|p| p.dim()).collect();
    let mut opt = AdamW::new(
        &shapes,
        optimizer.beta1,
        optimizer.beta2,
        optimizer.adam_eps,
        optimizer.weight_decay,
    );
    let ratio = (lr_max / lr_min).ln();
    let mut lrs = Vec::with_capacity(steps);
    let mut losses = Vec::with_capacity(steps);
    let mut running_min = f64::INFINITY;
    for i in 0..steps {
        let lr = lr_min * (ratio * i as f64 / (steps - 1) as f64).exp();
        let (loss, mut grads) = loss_grad(&params)?;
        lrs.push(lr);
        losses.push(loss);
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * running_min {
            return Ok(LrFinderResult {
                suggested: lr / 10.0,
                diverged: true,
                lrs,
                losses,
            });
        }
        running_min = running_min.min(loss);
        clip_global_norm(&mut grads, optimizer.grad_clip);
        let mut refs: Vec<&mut Array2<f64>> = params.iter_mut().collect();
        opt.step(&mut refs, &grads, lr);
    }
    Ok(LrFinderResult {
        suggested: lr_max / 10.0,
        diverged: false,
        lrs,
        losses,
    })
}

/// Range test of the combined objective on the first training batch. The
/// regularizer weight is held at its post-warmup value. `model` is not
/// modified.
pub fn lr_range_test(
    ds: &PairedDataset,
    model: &AlignmentModel,
    cfg: &TrainConfig,
    lr_min: f64,
    lr_max: f64,
    steps: usize,
) -> Result<LrFinderResult, TrainError> {
    let n = ds.len().min(cfg.batch_size);
    let idx: Vec<usize> = if n == ds.len() {
        (0..n).collect()
    } else {
        permutation(ds.len(), cfg.seed, "lr-finder")[..n].to_vec()
    };
    let a = ds.a().data().select(Axis(0), &idx);
    let b = ds.b().data().select(Axis(0), &idx);
    let mut scratch = model.clone();
    let params: Vec<Array2<f64>> = model.params().into_iter().cloned().collect();
    lr_range_search(
        params,
        |p| {
            for (dst, src) in scratch.params_mut().into_iter().zip(p) {
                dst.assign(src);
            }
            let ev = evaluate_with_lambda(&scratch, StepInputs::batch(a.view(), b.view()), cfg, cfg.lambda)?;
            Ok((ev.loss.total, ev.grads))
        },
        cfg,
        lr_min,
        lr_max,
        steps,
    )
}
