//! Composite graph builders for the training objective.

use super::{GradError, Graph, NodeId, Result};
use crate::structure::{DistanceKind, NormScheme, Reduction, StructureRegConfig};

pub fn preprocess(g: &mut Graph, x: NodeId, scheme: NormScheme, eps: f64) -> NodeId {
    match scheme {
        NormScheme::NormalizeCenter => {
            let n = g.row_normalize(x, eps);
            g.col_center(n)
        }
        NormScheme::CenterNormalize => {
            let c = g.col_center(x);
            g.row_normalize(c, eps)
        }
        NormScheme::Normalize => g.row_normalize(x, eps),
        NormScheme::StandardScale => g.col_standardize(x, eps),
    }
}

/// Row-stochastic similarity distribution of one space.
pub fn similarity_distribution(
    g: &mut Graph,
    x: NodeId,
    cfg: &StructureRegConfig,
) -> Result<NodeId> {
    let xt = preprocess(g, x, cfg.normalization, cfg.eps);
    let kernel = match cfg.distance {
        DistanceKind::CosineGram => g.matmul_t(xt, xt)?,
        DistanceKind::Rbf => g.rbf_kernel(xt, cfg.eps),
        DistanceKind::Spearman => return Err(GradError::NotDifferentiable("spearman similarity")),
    };
    let logits = g.scale(kernel, 1.0 / cfg.tau);
    Ok(g.row_softmax(logits))
}

/// Level-weighted JS divergence between two similarity distributions.
pub fn multilevel_js(
    g: &mut Graph,
    px: NodeId,
    pa: NodeId,
    cfg: &StructureRegConfig,
) -> Result<NodeId> {
    let n = g.value(px).nrows() as f64;
    let mut total: Option<NodeId> = None;
    for l in 1..=cfg.levels {
        let (px_l, pa_l) = if l == 1 {
            (px, pa)
        } else {
            (g.matpow(px, l)?, g.matpow(pa, l)?)
        };
        let js = g.js_div(px_l, pa_l, cfg.eps)?;
        let weighted = g.scale(js, 1.0 / l as f64);
        total = Some(match total {
            None => weighted,
            Some(t) => g.add(t, weighted)?,
        });
    }
    let total = total.expect("levels >= 1");
    let mut scale = 1.0 / cfg.levels as f64;
    if cfg.reduction == Reduction::RowMean {
        scale /= n;
    }
    Ok(g.scale(total, scale))
}

/// Differentiable regularizer between frozen `x` and aligned `a`.
pub fn structure_reg(
    g: &mut Graph,
    x: NodeId,
    a: NodeId,
    cfg: &StructureRegConfig,
) -> Result<NodeId> {
    let (nx, na) = (g.value(x).nrows(), g.value(a).nrows());
    if nx != na {
        return Err(GradError::ShapeMismatch {
            op: "structure_reg",
            left: g.value(x).dim(),
            right: g.value(a).dim(),
        });
    }
    let px = similarity_distribution(g, x, cfg)?;
    let pa = similarity_distribution(g, a, cfg)?;
    multilevel_js(g, px, pa, cfg)
}

/// Symmetric CLIP-style loss on row-normalized embeddings.
pub fn contrastive(g: &mut Graph, z1: NodeId, z2: NodeId, tau: f64) -> Result<NodeId> {
    const NORM_EPS: f64 = 1e-12;
    let n1 = g.row_normalize(z1, NORM_EPS);
    let n2 = g.row_normalize(z2, NORM_EPS);
    let sim = g.matmul_t(n1, n2)?;
    let logits = g.scale(sim, 1.0 / tau);
    g.symmetric_ce(logits)
}
