//! The combined alignment objective: symmetric contrastive loss plus the
//! warmed-up regularizer on each modality.

use ndarray::{Array2, ArrayView2};

use super::model::AlignmentModel;
use super::TrainConfig;
use crate::grad::{compose, GradError, Graph};
use crate::structure::{reg_structure, RegError};

/// Inputs of one optimizer step. `reg_a`/`reg_b` are the rows the
/// regularizer sees; `None` means the batch itself.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    pub a: ArrayView2<'a, f64>,
    pub b: ArrayView2<'a, f64>,
    pub reg_a: Option<ArrayView2<'a, f64>>,
    pub reg_b: Option<ArrayView2<'a, f64>>,
}

impl<'a> StepInputs<'a> {
    pub fn batch(a: ArrayView2<'a, f64>, b: ArrayView2<'a, f64>) -> Self {
        Self {
            a,
            b,
            reg_a: None,
            reg_b: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub contrastive: f64,
    pub reg_a: f64,
    pub reg_b: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluated {
    pub loss: LossBreakdown,
    /// One gradient per model parameter, in [`AlignmentModel::params`] order.
    pub grads: Vec<Array2<f64>>,
}

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Reg(#[from] RegError),
    #[error("batch needs at least 2 rows, got {0}")]
    TooFewRows(usize),
}

/// `(1/2)(CE_rows + CE_cols)` of `Z1_hat Z2_hat^T / tau`.
pub fn contrastive_loss(
    z1: ArrayView2<'_, f64>,
    z2: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<f64, GradError> {
    if z1.dim() != z2.dim() {
        return Err(GradError::ShapeMismatch {
            op: "contrastive_loss",
            left: z1.dim(),
            right: z2.dim(),
        });
    }
    let mut g = Graph::new();
    let a = g.constant(z1.to_owned());
    let b = g.constant(z2.to_owned());
    let loss = compose::contrastive(&mut g, a, b, tau)?;
    Ok(g.scalar_value(loss))
}

/// Loss and parameter gradients at optimizer step `step`.
///
/// When the effective weight `lambda_t` is zero the regularizer is evaluated
/// for reporting only and never enters the graph.
pub fn evaluate(
    model: &AlignmentModel,
    inputs: StepInputs<'_>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<Evaluated, ObjectiveError> {
    let lambda = cfg.lambda_at(step);
    evaluate_with_lambda(model, inputs, cfg, lambda)
}

pub fn evaluate_with_lambda(
    model: &AlignmentModel,
    inputs: StepInputs<'_>,
    cfg: &TrainConfig,
    lambda: f64,
) -> Result<Evaluated, ObjectiveError> {
    let n = inputs.a.nrows();
    if n < 2 {
        return Err(ObjectiveError::TooFewRows(n));
    }
    let mut g = Graph::new();
    let params = model.register(&mut g);
    let xa = g.constant(inputs.a.to_owned());
    let xb = g.constant(inputs.b.to_owned());
    let za = model.forward_a(&mut g, xa, &params)?;
    let zb = model.forward_b(&mut g, xb, &params)?;
    let contrastive = compose::contrastive(&mut g, za, zb, cfg.tau())?;

    let ra_in = inputs.reg_a.unwrap_or(inputs.a);
    let rb_in = inputs.reg_b.unwrap_or(inputs.b);

    let (root, reg_a, reg_b) = if lambda > 0.0 {
        let (xra, zra) = if inputs.reg_a.is_some() {
            let x = g.constant(ra_in.to_owned());
            (x, model.forward_a(&mut g, x, &params)?)
        } else {
            (xa, za)
        };
        let (xrb, zrb) = if inputs.reg_b.is_some() {
            let x = g.constant(rb_in.to_owned());
            (x, model.forward_b(&mut g, x, &params)?)
        } else {
            (xb, zb)
        };
        let ra = compose::structure_reg(&mut g, xra, zra, &cfg.reg)?;
        let rb = compose::structure_reg(&mut g, xrb, zrb, &cfg.reg)?;
        let both = g.add(ra, rb)?;
        let weighted = g.scale(both, lambda);
        let total = g.add(contrastive, weighted)?;
        (total, g.scalar_value(ra), g.scalar_value(rb))
    } else {
        let za_r = model.embed_a(ra_in);
        let zb_r = model.embed_b(rb_in);
        (
            contrastive,
            reg_structure(ra_in, za_r.view(), &cfg.reg)?,
            reg_structure(rb_in, zb_r.view(), &cfg.reg)?,
        )
    };

    let loss = LossBreakdown {
        total: g.scalar_value(root),
        contrastive: g.scalar_value(contrastive),
        reg_a,
        reg_b,
        lambda,
    };
    let mut grads = g.backward(root)?;
    let grads = params
        .all()
        .map(|id| grads.take(id).expect("every parameter feeds the loss"))
        .collect();
    Ok(Evaluated { loss, grads })
}
