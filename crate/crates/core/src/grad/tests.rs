use ndarray::{array, Array2};

use super::compose;
use super::*;
use crate::structure::{reg_structure, DistanceKind, NormScheme, Reduction, StructureRegConfig};
use crate::synth::gaussian;

type Build<'a> = dyn Fn(&mut Graph, NodeId) -> Result<NodeId> + 'a;

/// `sum(gelu(Y R))` for a fixed random `R`: weights every entry of `Y`
/// differently and nonlinearly.
fn probe_loss(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let cols = g.value(y).ncols();
    let r = g.constant(gaussian(cols, 3, seed));
    let yr = g.matmul(y, r)?;
    let act = g.gelu(yr);
    Ok(g.sum(act))
}

fn loss_and_grad(build: &Build<'_>, x: &Array2<f64>, seed: u64) -> (f64, Array2<f64>) {
    let mut g = Graph::new();
    let p = g.param(x.clone());
    let y = build(&mut g, p).unwrap();
    let loss = probe_loss(&mut g, y, seed).unwrap();
    let value = g.scalar_value(loss);
    let mut grads = g.backward(loss).unwrap();
    (value, grads.take(p).unwrap())
}

fn assert_fd_matches(build: &Build<'_>, x: &Array2<f64>, tol: f64) {
    let (_, analytic) = loss_and_grad(build, x, 99);
    let numeric = central_difference(|t| loss_and_grad(build, t, 99).0, x, 1e-6);
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        assert!(
            (a - n).abs() <= tol * (1.0 + n.abs()),
            "analytic {a} vs numeric {n}"
        );
    }
}

#[test]
fn sum_of_linear_map() {
    // d/dW sum(W X) has every row equal to the row sums of X
    let x = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
    let mut g = Graph::new();
    let w = g.param(gaussian(4, 3, 1));
    let xc = g.constant(x.clone());
    let wx = g.matmul(w, xc).unwrap();
    let loss = g.sum(wx);
    let grads = g.backward(loss).unwrap();
    let gw = grads.get(w).unwrap();
    for row in gw.rows() {
        assert_eq!(row.to_vec(), vec![3.0, 2.0, 1.0]);
    }
    assert!(grads.get(xc).is_none());
}

#[test]
fn elementwise_and_linear_ops() {
    let x = gaussian(5, 4, 2);
    let w = gaussian(3, 4, 3);
    let row = gaussian(1, 4, 4);
    let other = gaussian(5, 4, 5);
    assert_fd_matches(&|g, p| { let c = g_const(g, w.t().to_owned()); g.matmul(p, c) }, &x, 1e-6);
    assert_fd_matches(&|g, p| { let c = g_const(g, w.clone()); g.matmul_t(p, c) }, &x, 1e-6);
    assert_fd_matches(&|g, p| { let c = g_const(g, w.clone()); g.matmul_t(c, p) }, &x, 1e-6);
    assert_fd_matches(&|g, p| { let c = g_const(g, other.clone()); g.add(p, c) }, &x, 1e-6);
    assert_fd_matches(&|g, p| { let r = g_const(g, row.clone()); g.add_row(p, r) }, &x, 1e-6);
    assert_fd_matches(&|g, p| { let c = g_const(g, other.clone()); g.add_row(c, p) }, &row, 1e-6);
    assert_fd_matches(&|g, p| Ok(g.scale(p, -2.5)), &x, 1e-6);
    assert_fd_matches(&|g, p| Ok(g.gelu(p)), &x, 1e-6);
}

fn g_const(g: &mut Graph, v: Array2<f64>) -> NodeId {
    g.constant(v)
}

#[test]
fn normalization_ops() {
    let x = gaussian(6, 3, 6);
    assert_fd_matches(&|g, p| Ok(g.row_normalize(p, 1e-8)), &x, 1e-6);
    assert_fd_matches(&|g, p| Ok(g.col_center(p)), &x, 1e-6);
    assert_fd_matches(&|g, p| Ok(g.col_standardize(p, 1e-8)), &x, 1e-6);
}

#[test]
fn row_shorter_than_eps_is_divided_by_eps() {
    let mut g = Graph::new();
    let x = g.param(array![[1e-10, 0.0], [3.0, 4.0]]);
    let y = g.row_normalize(x, 1e-8);
    assert_eq!(g.value(y)[[0, 0]], 1e-2);
    let loss = g.sum(y);
    let gx = g.backward(loss).unwrap().take(x).unwrap();
    assert_eq!(gx.row(0).to_vec(), vec![1e8, 1e8]);
    // unit-norm row: (1 - y (y . 1)) / ||x||
    let expect = [(1.0 - 0.6 * 1.4) / 5.0, (1.0 - 0.8 * 1.4) / 5.0];
    for (a, b) in gx.row(1).iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn kernel_and_distribution_ops() {
    let x = gaussian(6, 3, 7);
    assert_fd_matches(&|g, p| Ok(g.rbf_kernel(p, 1e-8)), &x, 1e-5);
    let even = gaussian(5, 3, 8);
    assert_fd_matches(&|g, p| Ok(g.rbf_kernel(p, 1e-8)), &even, 1e-5);
    let s = gaussian(5, 5, 9);
    assert_fd_matches(&|g, p| Ok(g.row_softmax(p)), &s, 1e-6);
    assert_fd_matches(&|g, p| g.symmetric_ce(p), &s, 1e-6);
}

#[test]
fn matrix_power_product_rule() {
    let s = gaussian(4, 4, 10) * 0.7;
    for l in [1, 2, 3] {
        assert_fd_matches(&move |g, p| g.matpow(p, l), &s, 1e-6);
        assert_fd_matches(
            &move |g, p| {
                let sm = g.row_softmax(p);
                g.matpow(sm, l)
            },
            &s,
            1e-6,
        );
    }
}

#[test]
fn js_divergence_both_sides() {
    let s = gaussian(4, 4, 11);
    let t = gaussian(4, 4, 12);
    for first in [true, false] {
        let t = t.clone();
        assert_fd_matches(
            &move |g, p| {
                let pp = g.row_softmax(p);
                let c = g.constant(t.clone());
                let q = g.row_softmax(c);
                if first {
                    g.js_div(pp, q, 1e-8)
                } else {
                    g.js_div(q, pp, 1e-8)
                }
            },
            &s,
            1e-6,
        );
    }
}

#[test]
fn softmax_vjp_agrees_with_jvp() {
    let x = gaussian(5, 4, 13);
    let u = gaussian(1, 5, 14);
    let v = gaussian(4, 1, 15);
    let dir = gaussian(5, 4, 16);
    let mut g = Graph::new();
    let p = g.param(x.clone());
    let sm = g.row_softmax(p);
    let uc = g.constant(u.clone());
    let vc = g.constant(v.clone());
    let left = g.matmul(uc, sm).unwrap();
    let loss = g.matmul(left, vc).unwrap();
    let vjp = g.backward(loss).unwrap().take(p).unwrap();
    let lhs: f64 = (&vjp * &dir).sum();

    let softmax = |m: &Array2<f64>| {
        let mut gg = Graph::new();
        let c = gg.constant(m.clone());
        let s = gg.row_softmax(c);
        gg.value(s).clone()
    };
    let h = 1e-6;
    let jvp = (softmax(&(&x + &(&dir * h))) - softmax(&(&x - &(&dir * h)))) / (2.0 * h);
    let ybar = u.t().dot(&v.t());
    let rhs: f64 = (&ybar * &jvp).sum();
    assert!((lhs - rhs).abs() <= 1e-6 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
}

fn reg_graph(x: &Array2<f64>, a: &Array2<f64>, cfg: &StructureRegConfig) -> (f64, Array2<f64>) {
    let mut g = Graph::new();
    let xc = g.constant(x.clone());
    let ap = g.param(a.clone());
    let r = compose::structure_reg(&mut g, xc, ap, cfg).unwrap();
    let v = g.scalar_value(r);
    (v, g.backward(r).unwrap().take(ap).unwrap())
}

#[test]
fn composed_regularizer_matches_forward() {
    let x = gaussian(7, 4, 17);
    let a = gaussian(7, 3, 18);
    for normalization in [
        NormScheme::NormalizeCenter,
        NormScheme::CenterNormalize,
        NormScheme::Normalize,
        NormScheme::StandardScale,
    ] {
        for distance in [DistanceKind::CosineGram, DistanceKind::Rbf] {
            for reduction in [Reduction::Sum, Reduction::RowMean] {
                let cfg = StructureRegConfig {
                    levels: 2,
                    tau: 0.5,
                    normalization,
                    distance,
                    reduction,
                    ..Default::default()
                };
                let (v, grad) = reg_graph(&x, &a, &cfg);
                let direct = reg_structure(x.view(), a.view(), &cfg).unwrap();
                assert!((v - direct).abs() < 1e-12, "{v} vs {direct}");
                let numeric = central_difference(|t| reg_structure(x.view(), t.view(), &cfg).unwrap(), &a, 1e-6);
                for (p, q) in grad.iter().zip(numeric.iter()) {
                    assert!((p - q).abs() <= 1e-5 * (1.0 + q.abs()), "{normalization:?} {distance} {p} vs {q}");
                }
            }
        }
    }
}

#[test]
fn regularizer_gradient_vanishes_at_identity_map() {
    let x = gaussian(10, 4, 19);
    for levels in [1, 2, 3] {
        let cfg = StructureRegConfig {
            levels,
            ..Default::default()
        };
        // A = X W^T with W = I
        let mut g = Graph::new();
        let xc = g.constant(x.clone());
        let w = g.param(Array2::eye(4));
        let a = g.matmul_t(xc, w).unwrap();
        let r = compose::structure_reg(&mut g, xc, a, &cfg).unwrap();
        assert!(g.scalar_value(r) < 1e-6);
        let gw = g.backward(r).unwrap().take(w).unwrap();
        let worst = gw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-8, "levels {levels}: {worst}");
    }
}

#[test]
fn spearman_is_not_differentiable() {
    let cfg = StructureRegConfig {
        distance: DistanceKind::Spearman,
        ..Default::default()
    };
    let mut g = Graph::new();
    let x = g.constant(gaussian(5, 2, 1));
    let a = g.param(gaussian(5, 2, 2));
    assert!(matches!(
        compose::structure_reg(&mut g, x, a, &cfg),
        Err(GradError::NotDifferentiable(_))
    ));
}

#[test]
fn structural_errors() {
    let mut g = Graph::new();
    let a = g.param(gaussian(2, 2, 1));
    let b = g.gelu(a);
    let c = g.gelu(b);
    assert_eq!(g.backward(c).unwrap_err(), GradError::NonScalarLoss(2, 2));
    let loss = g.sum(c);
    g.rewire_for_test(b, vec![c]);
    assert!(matches!(g.backward(loss), Err(GradError::CycleDetected(_))));
    assert_eq!(g.backward(NodeId(999)).unwrap_err(), GradError::UnknownNode(999));

    let mut g = Graph::new();
    let a = g.param(gaussian(2, 3, 1));
    let b = g.param(gaussian(2, 2, 1));
    assert!(matches!(g.matmul(a, b), Err(GradError::ShapeMismatch { .. })));
    assert!(matches!(g.add(a, b), Err(GradError::ShapeMismatch { .. })));
    assert!(matches!(g.matpow(a, 2), Err(GradError::ShapeMismatch { .. })));
}

#[test]
fn constant_graph_has_no_gradients() {
    let mut g = Graph::new();
    let a = g.constant(gaussian(3, 3, 1));
    let s = g.sum(a);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(a).is_none());
    assert!(!g.node(s).requires_grad());
}

#[test]
fn gradients_accumulate_over_shared_inputs() {
    // sum(X + X) = 2 sum(X)
    let mut g = Graph::new();
    let x = g.param(gaussian(2, 3, 4));
    let y = g.add(x, x).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().iter().all(|&v| v == 2.0));
}
