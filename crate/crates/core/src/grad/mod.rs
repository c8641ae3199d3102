//! Reverse-mode differentiation over a closed vocabulary of matrix ops.
//!
//! A [`Graph`] is built eagerly: every `push` computes the node's value from
//! its inputs. [`Graph::backward`] then walks the nodes reachable from a
//! scalar loss in reverse topological order, applying one hand-written VJP
//! per op. Scalars are 1x1 matrices.

mod check;
pub mod compose;

pub use check::{central_difference, check_gradients, directional_fd, GradReport};

use ndarray::{Array2, Axis, Zip};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error("cycle detected at node {0}")]
    CycleDetected(usize),
    #[error("loss node must be 1x1, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{0} has no gradient implementation")]
    NotDifferentiable(&'static str),
}

pub type Result<T> = std::result::Result<T, GradError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag plus its non-tensor parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf { trainable: bool },
    /// `A B`
    MatMul,
    /// `A B^T`
    MatMulTransB,
    Add,
    /// `A + 1 b` for a 1 x k row `b`.
    AddRow,
    Scale(f64),
    /// tanh-approximated GELU.
    Gelu,
    /// `x / max(||x||, eps)` per row.
    RowNormalize { eps: f64 },
    ColCenter,
    /// Column z-score with `sqrt(var + eps)`.
    ColStandardize { eps: f64 },
    /// Gaussian kernel with median-of-pairwise-distances bandwidth.
    /// `pairs` are the one or two pairs realizing the median.
    RbfKernel {
        sigma: f64,
        pairs: Vec<(usize, usize)>,
        floored: bool,
    },
    RowSoftmax,
    MatPow(usize),
    JsDiv { eps: f64 },
    /// Symmetric cross-entropy of square logits with diagonal targets.
    SymmetricCe,
    Sum,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul => "matmul",
            Op::MatMulTransB => "matmul_t",
            Op::Add => "add",
            Op::AddRow => "add_row",
            Op::Scale(_) => "scale",
            Op::Gelu => "gelu",
            Op::RowNormalize { .. } => "row_normalize",
            Op::ColCenter => "col_center",
            Op::ColStandardize { .. } => "col_standardize",
            Op::RbfKernel { .. } => "rbf_kernel",
            Op::RowSoftmax => "row_softmax",
            Op::MatPow(_) => "matpow",
            Op::JsDiv { .. } => "js_div",
            Op::SymmetricCe => "symmetric_ce",
            Op::Sum => "sum",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Array2<f64>,
    pub adjoint: Option<Array2<f64>>,
    requires_grad: bool,
}

impl Node {
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Gradients of the trainable leaves.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn log_sum_exp<'a>(it: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + it.map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut p = x.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    p
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
}

fn sq_dist_matrix(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let diff = &x.row(i) - &x.row(j);
            let v = diff.dot(&diff);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Array2<f64>) -> NodeId {
        let requires_grad = match op {
            Op::Leaf { trainable } => trainable,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            adjoint: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_same(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (l, r) = (self.value(a).dim(), self.value(b).dim());
        if l != r {
            return Err(GradError::ShapeMismatch { op, left: l, right: r });
        }
        Ok(())
    }

    /// Trainable parameter.
    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Leaf { trainable: true }, vec![], value)
    }

    /// Frozen input; never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Leaf { trainable: false }, vec![], value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                left: va.dim(),
                right: vb.dim(),
            });
        }
        let v = va.dot(vb);
        Ok(self.push(Op::MatMul, vec![a, b], v))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(GradError::ShapeMismatch {
                op: "matmul_t",
                left: va.dim(),
                right: vb.dim(),
            });
        }
        let v = va.dot(&vb.t());
        Ok(self.push(Op::MatMulTransB, vec![a, b], v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(Op::Add, vec![a, b], v))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(GradError::ShapeMismatch {
                op: "add_row",
                left: va.dim(),
                right: vr.dim(),
            });
        }
        let v = va + &vr.row(0);
        Ok(self.push(Op::AddRow, vec![a, row], v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(Op::Scale(c), vec![a], v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.push(Op::Gelu, vec![a], v)
    }

    pub fn row_normalize(&mut self, a: NodeId, eps: f64) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.axis_iter_mut(Axis(0)) {
            let n = row.dot(&row).sqrt().max(eps);
            row /= n;
        }
        self.push(Op::RowNormalize { eps }, vec![a], v)
    }

    pub fn col_center(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mean = x.mean_axis(Axis(0)).expect("rows");
        let v = x - &mean;
        self.push(Op::ColCenter, vec![a], v)
    }

    pub fn col_standardize(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let mean = x.mean_axis(Axis(0)).expect("rows");
        let c = x - &mean;
        let std = c
            .mapv(|v| v * v)
            .mean_axis(Axis(0))
            .expect("rows")
            .mapv(|v| (v + eps).sqrt());
        let v = c / &std;
        self.push(Op::ColStandardize { eps }, vec![a], v)
    }

    /// RBF kernel matrix; the bandwidth is the median pairwise distance,
    /// floored at `eps`, and is differentiated through.
    pub fn rbf_kernel(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let n = x.nrows();
        let sq = sq_dist_matrix(x);
        let mut pairs: Vec<(f64, usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| (sq[[i, j]].sqrt(), i, j))
            .collect();
        pairs.sort_by(|p, q| p.0.total_cmp(&q.0).then((p.1, p.2).cmp(&(q.1, q.2))));
        let m = pairs.len();
        let (median, med_pairs) = if m == 0 {
            (0.0, vec![])
        } else if m % 2 == 1 {
            let p = pairs[m / 2];
            (p.0, vec![(p.1, p.2)])
        } else {
            let (p, q) = (pairs[m / 2 - 1], pairs[m / 2]);
            (0.5 * (p.0 + q.0), vec![(p.1, p.2), (q.1, q.2)])
        };
        let floored = median <= eps;
        let sigma = median.max(eps);
        let denom = 2.0 * sigma * sigma;
        let v = sq.mapv(|d| (-d / denom).exp());
        self.push(
            Op::RbfKernel {
                sigma,
                pairs: med_pairs,
                floored,
            },
            vec![a],
            v,
        )
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(Op::RowSoftmax, vec![a], v)
    }

    pub fn matpow(&mut self, a: NodeId, l: usize) -> Result<NodeId> {
        let p = self.value(a);
        if p.nrows() != p.ncols() {
            return Err(GradError::ShapeMismatch {
                op: "matpow",
                left: p.dim(),
                right: p.dim(),
            });
        }
        assert!(l >= 1, "matpow needs l >= 1");
        let mut v = p.clone();
        for _ in 1..l {
            v = v.dot(p);
        }
        Ok(self.push(Op::MatPow(l), vec![a], v))
    }

    pub fn js_div(&mut self, p: NodeId, q: NodeId, eps: f64) -> Result<NodeId> {
        self.check_same("js_div", p, q)?;
        let v = crate::structure::js_divergence(self.value(p).view(), self.value(q).view(), eps);
        Ok(self.push(Op::JsDiv { eps }, vec![p, q], scalar(v)))
    }

    pub fn symmetric_ce(&mut self, logits: NodeId) -> Result<NodeId> {
        let l = self.value(logits);
        let n = l.nrows();
        if n != l.ncols() {
            return Err(GradError::ShapeMismatch {
                op: "symmetric_ce",
                left: l.dim(),
                right: l.dim(),
            });
        }
        let mut rows = 0.0;
        let mut cols = 0.0;
        for i in 0..n {
            rows += log_sum_exp(l.row(i).iter()) - l[[i, i]];
            cols += log_sum_exp(l.column(i).iter()) - l[[i, i]];
        }
        let v = 0.5 * (rows + cols) / n as f64;
        Ok(self.push(Op::SymmetricCe, vec![logits], scalar(v)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum();
        self.push(Op::Sum, vec![a], scalar(v))
    }

    fn topo_order(&self, root: NodeId) -> Result<Vec<usize>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Open,
            Done,
        }
        let mut mark = vec![Mark::New; self.nodes.len()];
        let mut order = Vec::new();
        let mut stack = vec![(root.0, 0usize)];
        mark[root.0] = Mark::Open;
        while let Some(&mut (id, ref mut next)) = stack.last_mut() {
            if let Some(&child) = self.nodes[id].inputs.get(*next) {
                *next += 1;
                let c = child.0;
                if c >= self.nodes.len() {
                    return Err(GradError::UnknownNode(c));
                }
                if !self.nodes[c].requires_grad {
                    continue;
                }
                match mark[c] {
                    Mark::Open => return Err(GradError::CycleDetected(c)),
                    Mark::Done => {}
                    Mark::New => {
                        mark[c] = Mark::Open;
                        stack.push((c, 0));
                    }
                }
            } else {
                mark[id] = Mark::Done;
                order.push(id);
                stack.pop();
            }
        }
        order.reverse();
        Ok(order)
    }

    /// Differentiate a scalar node with respect to every trainable leaf.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(GradError::UnknownNode(loss.0));
        }
        let (r, c) = self.value(loss).dim();
        if (r, c) != (1, 1) {
            return Err(GradError::NonScalarLoss(r, c));
        }
        for n in &mut self.nodes {
            n.adjoint = None;
        }
        let mut grads = Gradients {
            grads: vec![None; self.nodes.len()],
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(grads);
        }
        let order = self.topo_order(loss)?;
        self.nodes[loss.0].adjoint = Some(scalar(1.0));
        for id in order {
            let Some(adj) = self.nodes[id].adjoint.take() else {
                continue;
            };
            let contributions = self.vjp(id, &adj);
            for (input, g) in contributions {
                let slot = &mut self.nodes[input.0].adjoint;
                match slot {
                    Some(acc) => *acc += &g,
                    None => *slot = Some(g),
                }
            }
            if let Op::Leaf { trainable: true } = self.nodes[id].op {
                grads.grads[id] = Some(adj.clone());
            }
            self.nodes[id].adjoint = Some(adj);
        }
        Ok(grads)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Input adjoint contributions of node `id` given its adjoint.
    fn vjp(&self, id: usize, adj: &Array2<f64>) -> Vec<(NodeId, Array2<f64>)> {
        let node = &self.nodes[id];
        let inp = &node.inputs;
        let y = &node.value;
        let mut out = Vec::with_capacity(inp.len());
        let mut emit = |k: usize, f: &dyn Fn() -> Array2<f64>| {
            if self.wants(inp[k]) {
                out.push((inp[k], f()));
            }
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul => {
                let (a, b) = (self.value(inp[0]), self.value(inp[1]));
                emit(0, &|| adj.dot(&b.t()));
                emit(1, &|| a.t().dot(adj));
            }
            Op::MatMulTransB => {
                let (a, b) = (self.value(inp[0]), self.value(inp[1]));
                emit(0, &|| adj.dot(b));
                emit(1, &|| adj.t().dot(a));
            }
            Op::Add => {
                emit(0, &|| adj.clone());
                emit(1, &|| adj.clone());
            }
            Op::AddRow => {
                emit(0, &|| adj.clone());
                emit(1, &|| adj.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(c) => emit(0, &|| adj * *c),
            Op::Gelu => {
                let x = self.value(inp[0]);
                emit(0, &|| {
                    let mut g = adj.clone();
                    Zip::from(&mut g).and(x).for_each(|g, &x| *g *= gelu_grad(x));
                    g
                });
            }
            Op::RowNormalize { eps } => {
                let x = self.value(inp[0]);
                emit(0, &|| {
                    let mut g = adj.clone();
                    for ((mut gi, yi), xi) in g
                        .axis_iter_mut(Axis(0))
                        .zip(y.axis_iter(Axis(0)))
                        .zip(x.axis_iter(Axis(0)))
                    {
                        let norm = xi.dot(&xi).sqrt();
                        if norm > *eps {
                            let proj = yi.dot(&gi);
                            gi.scaled_add(-proj, &yi);
                            gi /= norm;
                        } else {
                            gi /= *eps;
                        }
                    }
                    g
                });
            }
            Op::ColCenter => emit(0, &|| {
                let mean = adj.mean_axis(Axis(0)).expect("rows");
                adj - &mean
            }),
            Op::ColStandardize { eps } => {
                let x = self.value(inp[0]);
                emit(0, &|| {
                    let mean = x.mean_axis(Axis(0)).expect("rows");
                    let c = x - &mean;
                    let std = c
                        .mapv(|v| v * v)
                        .mean_axis(Axis(0))
                        .expect("rows")
                        .mapv(|v| (v + eps).sqrt());
                    let g_mean = adj.mean_axis(Axis(0)).expect("rows");
                    let gy_mean = (adj * y).mean_axis(Axis(0)).expect("rows");
                    let mut g = adj - &g_mean;
                    g -= &(y * &gy_mean);
                    g / &std
                });
            }
            Op::RbfKernel {
                sigma,
                pairs,
                floored,
            } => {
                let x = self.value(inp[0]);
                emit(0, &|| {
                    let n = x.nrows();
                    let s2 = sigma * sigma;
                    let sq = sq_dist_matrix(x);
                    let mut g = Array2::zeros(x.dim());
                    // kernel entries at fixed bandwidth
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let w = (adj[[i, j]] + adj[[j, i]]) * y[[i, j]] / s2;
                            let diff = &x.row(i) - &x.row(j);
                            g.row_mut(i).scaled_add(-w, &diff);
                        }
                    }
                    // bandwidth dependence through the median distance
                    if !*floored && !pairs.is_empty() {
                        let mut s_bar = 0.0;
                        Zip::from(adj).and(y).and(&sq).for_each(|&a, &k, &d| {
                            s_bar += a * k * d / (s2 * sigma);
                        });
                        let share = s_bar / pairs.len() as f64;
                        for &(p, q) in pairs {
                            let diff = &x.row(p) - &x.row(q);
                            let dist = diff.dot(&diff).sqrt();
                            if dist > 0.0 {
                                g.row_mut(p).scaled_add(share / dist, &diff);
                                g.row_mut(q).scaled_add(-share / dist, &diff);
                            }
                        }
                    }
                    g
                });
            }
            Op::RowSoftmax => emit(0, &|| {
                let mut g = adj * y;
                for (mut gi, yi) in g.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                    let s = gi.sum();
                    gi.scaled_add(-s, &yi);
                }
                g
            }),
            Op::MatPow(l) => {
                let p = self.value(inp[0]);
                emit(0, &|| {
                    let pt = p.t().to_owned();
                    let mut powers = vec![Array2::eye(p.nrows())];
                    for j in 1..*l {
                        let next = powers[j - 1].dot(&pt);
                        powers.push(next);
                    }
                    let mut g = Array2::zeros(p.dim());
                    for j in 0..*l {
                        g += &powers[j].dot(adj).dot(&powers[l - 1 - j]);
                    }
                    g
                });
            }
            Op::JsDiv { eps } => {
                let (p, q) = (self.value(inp[0]), self.value(inp[1]));
                let up = adj[[0, 0]];
                let side = |first: bool| {
                    let mut g = Array2::zeros(p.dim());
                    Zip::from(&mut g).and(p).and(q).for_each(|g, &pv, &qv| {
                        let m = 0.5 * (pv + qv);
                        let own = if first { pv } else { qv };
                        *g = 0.5
                            * up
                            * ((own + eps).ln() - (m + eps).ln() + own / (own + eps)
                                - m / (m + eps));
                    });
                    g
                };
                emit(0, &|| side(true));
                emit(1, &|| side(false));
            }
            Op::SymmetricCe => {
                let l = self.value(inp[0]);
                let up = adj[[0, 0]];
                emit(0, &|| {
                    let n = l.nrows();
                    let rows = softmax_rows(l);
                    let cols = softmax_rows(&l.t().to_owned()).reversed_axes();
                    let mut g = (rows + cols) * (0.5 * up / n as f64);
                    for i in 0..n {
                        g[[i, i]] -= up / n as f64;
                    }
                    g
                });
            }
            Op::Sum => {
                let a = self.value(inp[0]);
                emit(0, &|| Array2::from_elem(a.dim(), adj[[0, 0]]));
            }
        }
        out
    }

    #[cfg(test)]
    pub(crate) fn rewire_for_test(&mut self, node: NodeId, inputs: Vec<NodeId>) {
        self.nodes[node.0].inputs = inputs;
    }
}

#[cfg(test)]
mod tests;
