use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::grad::{gelu, GradError, Graph, NodeId};
use crate::rng;
use crate::synth::semi_orthogonal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Mlp,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp),
            other => Err(format!("unknown model kind {other:?} (expected linear or mlp)")),
        }
    }
}

/// One side's map into the shared space. Weights are stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Linear {
        w: Array2<f64>,
    },
    /// `gelu(x W1^T + b1) W2^T + b2`
    Mlp {
        w1: Array2<f64>,
        b1: Array2<f64>,
        w2: Array2<f64>,
        b2: Array2<f64>,
    },
}

/// `rows x cols` matrix with ones on the main diagonal.
pub fn rect_identity(rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for i in 0..rows.min(cols) {
        m[[i, i]] = 1.0;
    }
    m
}

impl Projection {
    pub fn input_dim(&self) -> usize {
        match self {
            Projection::Linear { w } => w.ncols(),
            Projection::Mlp { w1, .. } => w1.ncols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Projection::Linear { w } => w.nrows(),
            Projection::Mlp { w2, .. } => w2.nrows(),
        }
    }

    fn names(&self) -> &'static [&'static str] {
        match self {
            Projection::Linear { .. } => &["w"],
            Projection::Mlp { .. } => &["w1", "b1", "w2", "b2"],
        }
    }

    fn tensors(&self) -> Vec<&Array2<f64>> {
        match self {
            Projection::Linear { w } => vec![w],
            Projection::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        match self {
            Projection::Linear { w } => vec![w],
            Projection::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        match self {
            Projection::Linear { w } => x.dot(&w.t()),
            Projection::Mlp { w1, b1, w2, b2 } => {
                let h = (x.dot(&w1.t()) + &b1.row(0)).mapv(gelu);
                h.dot(&w2.t()) + &b2.row(0)
            }
        }
    }

    /// Output node given the parameter nodes (in [`Self::tensors`] order).
    fn build(&self, g: &mut Graph, x: NodeId, p: &[NodeId]) -> Result<NodeId, GradError> {
        match self {
            Projection::Linear { .. } => g.matmul_t(x, p[0]),
            Projection::Mlp { .. } => {
                let h = g.matmul_t(x, p[0])?;
                let h = g.add_row(h, p[1])?;
                let h = g.gelu(h);
                let z = g.matmul_t(h, p[2])?;
                g.add_row(z, p[3])
            }
        }
    }
}

/// Pair of maps `f1: R^d1 -> R^k`, `f2: R^d2 -> R^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    pub kind: ModelKind,
    pub f1: Projection,
    pub f2: Projection,
}

/// Parameter leaves of both sides inside one graph.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub f1: Vec<NodeId>,
    pub f2: Vec<NodeId>,
}

impl ParamNodes {
    pub fn all(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.f1.iter().chain(self.f2.iter()).copied()
    }
}

fn init_projection(kind: ModelKind, d: usize, k: usize, seed: u64, side: &str) -> Projection {
    match kind {
        ModelKind::Linear => Projection::Linear {
            w: rect_identity(k, d),
        },
        ModelKind::Mlp => {
            let hidden = d.max(k);
            let mut r = rng::stream(seed, &format!("init-{side}"));
            Projection::Mlp {
                w1: semi_orthogonal(&mut r, hidden, d),
                b1: Array2::zeros((1, hidden)),
                w2: rect_identity(k, hidden),
                b2: Array2::zeros((1, k)),
            }
        }
    }
}

/// Identity-initialized model. MLP hidden layers are random semi-orthogonal
/// matrices drawn from the seed; the output layers are rectangular identities.
pub fn init_model(kind: ModelKind, d1: usize, d2: usize, k: usize, seed: u64) -> AlignmentModel {
    assert!(d1 >= 1 && d2 >= 1 && k >= 1, "dimensions must be >= 1");
    AlignmentModel {
        kind,
        f1: init_projection(kind, d1, k, seed, "f1"),
        f2: init_projection(kind, d2, k, seed, "f2"),
    }
}

impl AlignmentModel {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.f1.input_dim(), self.f2.input_dim(), self.f1.output_dim())
    }

    pub fn hidden_dims(&self) -> Option<(usize, usize)> {
        match (&self.f1, &self.f2) {
            (Projection::Mlp { w1: a, .. }, Projection::Mlp { w1: b, .. }) => {
                Some((a.nrows(), b.nrows()))
            }
            _ => None,
        }
    }

    pub fn embed_a(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.f1.apply(x)
    }

    pub fn embed_b(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.f2.apply(x)
    }

    /// `(name, tensor)` pairs, f1 first.
    pub fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        self.f1
            .names()
            .iter()
            .zip(self.f1.tensors())
            .map(|(n, t)| (format!("f1.{n}"), t))
            .chain(
                self.f2
                    .names()
                    .iter()
                    .zip(self.f2.tensors())
                    .map(|(n, t)| (format!("f2.{n}"), t)),
            )
            .collect()
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut v = self.f1.tensors();
        v.extend(self.f2.tensors());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = self.f1.tensors_mut();
        v.extend(self.f2.tensors_mut());
        v
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Register every parameter as a trainable leaf.
    pub fn register(&self, g: &mut Graph) -> ParamNodes {
        ParamNodes {
            f1: self.f1.tensors().into_iter().map(|t| g.param(t.clone())).collect(),
            f2: self.f2.tensors().into_iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    pub fn forward_a(&self, g: &mut Graph, x: NodeId, p: &ParamNodes) -> Result<NodeId, GradError> {
        self.f1.build(g, x, &p.f1)
    }

    pub fn forward_b(&self, g: &mut Graph, x: NodeId, p: &ParamNodes) -> Result<NodeId, GradError> {
        self.f2.build(g, x, &p.f2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_init_is_rect_identity() {
        let m = init_model(ModelKind::Linear, 4, 6, 4, 0);
        let Projection::Linear { w } = &m.f1 else { panic!() };
        assert_eq!(w, &Array2::<f64>::eye(4));
        let Projection::Linear { w } = &m.f2 else { panic!() };
        assert_eq!(w.dim(), (4, 6));
        assert_eq!(w, &rect_identity(4, 6));
        assert_eq!(m.dims(), (4, 6, 4));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(ModelKind::Mlp, 5, 3, 4, 9);
        let b = init_model(ModelKind::Mlp, 5, 3, 4, 9);
        assert_eq!(a, b);
        let c = init_model(ModelKind::Mlp, 5, 3, 4, 10);
        assert_ne!(a, c);
        assert_eq!(a.hidden_dims(), Some((5, 4)));
        assert_eq!(a.named_params().len(), 8);
    }
}
