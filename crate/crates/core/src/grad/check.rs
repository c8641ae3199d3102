//! Finite-difference checks of the analytic gradients.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::store::PairedDataset;
use crate::synth::gaussian_from;
use crate::train::objective::{evaluate_with_lambda, ObjectiveError, StepInputs};
use crate::train::{AlignmentModel, TrainConfig};

/// Step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-5;

/// Full central-difference gradient of `f` at `x`.
pub fn central_difference<F>(mut f: F, x: &Array2<f64>, h: f64) -> Array2<f64>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut out = Array2::zeros(x.dim());
    for (idx, &v) in x.indexed_iter() {
        probe[idx] = v + h;
        let up = f(&probe);
        probe[idx] = v - h;
        let down = f(&probe);
        probe[idx] = v;
        out[idx] = (up - down) / (2.0 * h);
    }
    out
}

/// Central-difference derivative of `f` at `x` along `dir`.
pub fn directional_fd<F>(mut f: F, x: &Array2<f64>, dir: &Array2<f64>, h: f64) -> f64
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let up = f(&(x + &(dir * h)));
    let down = f(&(x - &(dir * h)));
    (up - down) / (2.0 * h)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub parameter_name: String,
    pub analytic_grad_norm: f64,
    pub max_rel_error: f64,
    pub probe_count: usize,
}

/// Compare the analytic gradient of the full objective (with the weight at
/// `cfg.lambda`, no warmup) against central differences along `probes`
/// random unit directions per parameter tensor.
pub fn check_gradients(
    model: &AlignmentModel,
    batch: &PairedDataset,
    cfg: &TrainConfig,
    probes: usize,
) -> Result<Vec<GradReport>, ObjectiveError> {
    let (xa, xb) = (batch.a().data().view(), batch.b().data().view());
    let inputs = StepInputs::batch(xa, xb);
    let analytic = evaluate_with_lambda(model, inputs, cfg, cfg.lambda)?.grads;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut rng = rng::stream(cfg.seed, "grad-check");
    let mut reports = Vec::with_capacity(names.len());
    for (p, (name, grad)) in names.into_iter().zip(&analytic).enumerate() {
        let base = model.params()[p].clone();
        let mut worst = 0.0f64;
        for _ in 0..probes {
            let mut dir = gaussian_from(&mut rng, base.nrows(), base.ncols());
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir /= norm;
            let exact: f64 = (grad * &dir).sum();
            let mut scratch = model.clone();
            let mut failure = None;
            let numeric = directional_fd(
                |theta| {
                    scratch.params_mut()[p].assign(theta);
                    match evaluate_with_lambda(&scratch, inputs, cfg, cfg.lambda) {
                        Ok(e) => e.loss.total,
                        Err(e) => {
                            failure = Some(e);
                            f64::NAN
                        }
                    }
                },
                &base,
                &dir,
                FD_STEP,
            );
            if let Some(e) = failure {
                return Err(e);
            }
            worst = worst.max(relative_error(exact, numeric));
        }
        reports.push(GradReport {
            parameter_name: name,
            analytic_grad_norm: grad.iter().map(|v| v * v).sum::<f64>().sqrt(),
            max_rel_error: worst,
            probe_count: probes,
        });
    }
    Ok(reports)
}
