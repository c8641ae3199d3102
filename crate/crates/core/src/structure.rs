//! Forward evaluation of the multi-level neighborhood-geometry regularizer.
//!
//! Pipeline per space: row l2-normalize, column-center, scaled Gram matrix,
//! row softmax, matrix powers for each level, Jensen-Shannon divergence
//! between the two spaces' level-l distributions, harmonic level weighting.
//!
//! The differentiable version used during training lives in
//! [`crate::grad::ops`] and is checked against [`reg_structure`].

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RegError {
    #[error("row count mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("invalid regularizer config: {0}")]
    InvalidConfig(String),
    #[error("unknown similarity kind {0:?}")]
    UnknownKind(String),
}

/// How rows are preprocessed before the Gram matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormScheme {
    /// l2-normalize rows, then subtract the column mean.
    #[default]
    NormalizeCenter,
    CenterNormalize,
    Normalize,
    /// Column z-score.
    StandardScale,
}

/// Similarity backend feeding the row softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    #[default]
    CosineGram,
    Rbf,
    Spearman,
}

impl FromStr for DistanceKind {
    type Err = RegError;

    fn from_str(s: &str) -> Result<Self, RegError> {
        match s {
            "cosine-gram" | "cosine" => Ok(Self::CosineGram),
            "rbf" => Ok(Self::Rbf),
            "spearman" => Ok(Self::Spearman),
            other => Err(RegError::UnknownKind(other.to_owned())),
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CosineGram => "cosine-gram",
            Self::Rbf => "rbf",
            Self::Spearman => "spearman",
        })
    }
}

/// Reduction of the entrywise JS terms within one level.
///
/// `Sum` adds all N^2 terms (the reference computation). `RowMean` divides
/// that sum by N, i.e. averages the per-row divergences; this is the form
/// for which the single-pair sensitivity bound `4 ln 2 / N` holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Sum,
    RowMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructureRegConfig {
    pub levels: usize,
    pub tau: f64,
    pub eps: f64,
    pub normalization: NormScheme,
    pub distance: DistanceKind,
    pub reduction: Reduction,
}

impl Default for StructureRegConfig {
    fn default() -> Self {
        Self {
            levels: 1,
            tau: 0.05,
            eps: 1e-8,
            normalization: NormScheme::NormalizeCenter,
            distance: DistanceKind::CosineGram,
            reduction: Reduction::Sum,
        }
    }
}

impl StructureRegConfig {
    pub fn validate(&self) -> Result<(), RegError> {
        if self.levels == 0 {
            return Err(RegError::InvalidConfig("levels must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(RegError::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(RegError::InvalidConfig(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Output of a normalization step, with rows whose norm fell under the
/// epsilon floor.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Array2<f64>,
    pub degenerate_rows: Vec<usize>,
}

/// Row-stochastic N x N matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityDistribution {
    pub p: Array2<f64>,
    pub tau_used: f64,
}

/// `x / max(||x||, eps)` per row.
pub fn row_normalize(x: ArrayView2<'_, f64>, eps: f64) -> Normalized {
    let mut values = x.to_owned();
    let mut degenerate_rows = Vec::new();
    for (i, mut row) in values.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm <= eps {
            degenerate_rows.push(i);
        }
        row /= norm.max(eps);
    }
    if !degenerate_rows.is_empty() {
        log::warn!(
            "{} row(s) with norm below {eps:e} clamped during normalization",
            degenerate_rows.len()
        );
    }
    Normalized {
        values,
        degenerate_rows,
    }
}

pub fn column_center(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("at least one row");
    &x - &mean
}

pub fn column_standardize(x: ArrayView2<'_, f64>, eps: f64) -> Array2<f64> {
    let centered = column_center(x);
    let var: Array1<f64> = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("rows");
    let std = var.mapv(|v| (v + eps).sqrt());
    centered / &std
}

/// l2-normalize rows, then center columns.
pub fn normalize_center(x: ArrayView2<'_, f64>, eps: f64) -> Normalized {
    let n = row_normalize(x, eps);
    Normalized {
        values: column_center(n.values.view()),
        degenerate_rows: n.degenerate_rows,
    }
}

pub fn preprocess(x: ArrayView2<'_, f64>, scheme: NormScheme, eps: f64) -> Normalized {
    match scheme {
        NormScheme::NormalizeCenter => normalize_center(x, eps),
        NormScheme::CenterNormalize => row_normalize(column_center(x).view(), eps),
        NormScheme::Normalize => row_normalize(x, eps),
        NormScheme::StandardScale => Normalized {
            values: column_standardize(x, eps),
            degenerate_rows: Vec::new(),
        },
    }
}

/// `X X^T / tau`.
pub fn similarity_logits(x: ArrayView2<'_, f64>, tau: f64) -> Array2<f64> {
    x.dot(&x.t()) / tau
}

/// Max-subtracted softmax of each row.
pub fn row_softmax(s: ArrayView2<'_, f64>, tau_used: f64) -> SimilarityDistribution {
    let mut p = s.to_owned();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    SimilarityDistribution { p, tau_used }
}

/// `P^l` by repeated multiplication.
pub fn matrix_power(p: ArrayView2<'_, f64>, l: usize) -> Array2<f64> {
    assert!(l >= 1, "matrix power needs l >= 1");
    let mut out = p.to_owned();
    for _ in 1..l {
        out = out.dot(&p);
    }
    out
}

/// `0.5 KL(P||M) + 0.5 KL(Q||M)`, `M = (P+Q)/2`, natural log, summed over
/// every entry, with `eps` inside each logarithm.
pub fn js_divergence(p: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>, eps: f64) -> f64 {
    assert_eq!(p.dim(), q.dim(), "js_divergence shape mismatch");
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.iter().zip(q.iter()) {
        let log_m = (0.5 * (a + b) + eps).ln();
        kl_p += a * ((a + eps).ln() - log_m);
        kl_q += b * ((b + eps).ln() - log_m);
    }
    0.5 * (kl_q + kl_p)
}

fn pairwise_sq_dists(x: ArrayView2<'_, f64>) -> Array2<f64> {
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

/// Median of the pairwise Euclidean distances over `i < j` (0 if N < 2).
pub fn median_pairwise_distance(x: ArrayView2<'_, f64>) -> f64 {
    let sq = pairwise_sq_dists(x);
    let n = x.nrows();
    let mut dists: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| sq[[i, j]].sqrt())
        .collect();
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    }
}

/// `exp(-||xi - xj||^2 / (2 sigma^2))` with the given bandwidth.
pub fn rbf_kernel(x: ArrayView2<'_, f64>, sigma: f64) -> Array2<f64> {
    let denom = 2.0 * sigma * sigma;
    pairwise_sq_dists(x).mapv(|d| (-d / denom).exp())
}

/// Ranks (1-based) with ties assigned their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation between every pair of rows.
pub fn spearman_matrix(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.nrows();
    let ranked: Vec<Array1<f64>> = x
        .axis_iter(Axis(0))
        .map(|row| {
            let r = Array1::from(average_ranks(&row.to_vec()));
            let mean = r.mean().unwrap_or(0.0);
            r - mean
        })
        .collect();
    let norms: Vec<f64> = ranked.iter().map(|r| r.dot(r).sqrt()).collect();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let denom = norms[i] * norms[j];
            out[[i, j]] = if denom > 0.0 {
                ranked[i].dot(&ranked[j]) / denom
            } else {
                0.0
            };
        }
    }
    out
}

/// Logits for one space under the chosen similarity backend.
pub fn logits_for(x: ArrayView2<'_, f64>, kind: DistanceKind, tau: f64, eps: f64) -> Array2<f64> {
    match kind {
        DistanceKind::CosineGram => similarity_logits(x, tau),
        DistanceKind::Rbf => {
            let sigma = median_pairwise_distance(x).max(eps);
            rbf_kernel(x, sigma) / tau
        }
        DistanceKind::Spearman => spearman_matrix(x) / tau,
    }
}

/// Similarity distributions of two preprocessed spaces.
pub fn similarity_pair(
    xt: ArrayView2<'_, f64>,
    at: ArrayView2<'_, f64>,
    kind: DistanceKind,
    tau: f64,
    eps: f64,
) -> (SimilarityDistribution, SimilarityDistribution) {
    (
        row_softmax(logits_for(xt, kind, tau, eps).view(), tau),
        row_softmax(logits_for(at, kind, tau, eps).view(), tau),
    )
}

/// Level-weighted divergence between two row-stochastic matrices.
pub fn multilevel_js(
    px: ArrayView2<'_, f64>,
    pa: ArrayView2<'_, f64>,
    levels: usize,
    eps: f64,
    reduction: Reduction,
) -> f64 {
    let n = px.nrows() as f64;
    let mut px_l = px.to_owned();
    let mut pa_l = pa.to_owned();
    let mut total = 0.0;
    for l in 1..=levels {
        if l > 1 {
            px_l = px_l.dot(&px);
            pa_l = pa_l.dot(&pa);
        }
        let mut js = js_divergence(px_l.view(), pa_l.view(), eps);
        if reduction == Reduction::RowMean {
            js /= n;
        }
        total += js / l as f64;
    }
    total / levels as f64
}

/// The regularizer between a frozen space `x` and its aligned image `a`.
pub fn reg_structure(
    x: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    cfg: &StructureRegConfig,
) -> Result<f64, RegError> {
    cfg.validate()?;
    if x.nrows() != a.nrows() {
        return Err(RegError::ShapeMismatch(x.nrows(), a.nrows()));
    }
    if x.nrows() < 2 {
        return Err(RegError::TooFewRows(x.nrows()));
    }
    let xt = preprocess(x, cfg.normalization, cfg.eps);
    let at = preprocess(a, cfg.normalization, cfg.eps);
    let (px, pa) = similarity_pair(xt.values.view(), at.values.view(), cfg.distance, cfg.tau, cfg.eps);
    Ok(multilevel_js(px.p.view(), pa.p.view(), cfg.levels, cfg.eps, cfg.reduction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gaussian, random_orthonormal};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn normalize_center_by_hand() {
        let out = normalize_center(array![[3.0, 0.0], [0.0, 4.0]].view(), 1e-8);
        assert_eq!(out.values, array![[0.5, -0.5], [-0.5, 0.5]]);
        assert!(out.degenerate_rows.is_empty());
    }

    #[test]
    fn single_row_centers_to_origin() {
        let out = normalize_center(array![[1.0, 2.0, -3.0]].view(), 1e-8);
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_columns_have_zero_mean() {
        let x = gaussian(8, 4, 11);
        let out = normalize_center(x.view(), 1e-8);
        for m in out.values.mean_axis(Axis(0)).unwrap() {
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_row_is_flagged_not_fatal() {
        let out = normalize_center(array![[0.0, 0.0], [1.0, 0.0]].view(), 1e-8);
        assert_eq!(out.degenerate_rows, vec![0]);
        assert!(out.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn offsets_after_normalization_are_removed() {
        let x = gaussian(6, 3, 2);
        let xh = row_normalize(x.view(), 1e-8).values;
        let shifted = &xh + &array![0.3, -1.0, 2.0];
        let a = column_center(xh.view());
        let b = column_center(shifted.view());
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn logits_cases() {
        let s = similarity_logits(array![[1.0, 0.0], [0.0, 1.0]].view(), 1.0);
        assert_eq!(s, array![[1.0, 0.0], [0.0, 1.0]]);
        let x = gaussian(5, 3, 4);
        let s1 = similarity_logits(x.view(), 1.0);
        let s2 = similarity_logits(x.view(), 0.05);
        assert_abs_diff_eq!(s1 * 20.0, s2, epsilon = 1e-12);
        let s = similarity_logits(gaussian(7, 3, 5).view(), 0.05);
        assert_abs_diff_eq!(s.clone(), s.t().to_owned(), epsilon = 1e-12);
    }

    #[test]
    fn softmax_cases() {
        let p = row_softmax(Array2::zeros((2, 2)).view(), 1.0);
        assert_eq!(p.p, array![[0.5, 0.5], [0.5, 0.5]]);
        let p = row_softmax(array![[1000.0, 0.0], [0.0, 0.0]].view(), 1.0);
        assert!((p.p[[0, 0]] - 1.0).abs() < 1e-12 && p.p[[0, 1]] < 1e-300);
        let p = row_softmax((gaussian(6, 6, 8) * 10.0).view(), 1.0);
        for s in p.p.sum_axis(Axis(1)) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn power_cases() {
        let p = row_softmax(gaussian(5, 5, 1).view(), 1.0).p;
        assert_eq!(matrix_power(p.view(), 1), p);
        let half = array![[0.5, 0.5], [0.5, 0.5]];
        assert_abs_diff_eq!(matrix_power(half.view(), 3), half, epsilon = 1e-15);
        for s in matrix_power(p.view(), 2).sum_axis(Axis(1)) {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn js_cases() {
        let p = row_softmax(gaussian(4, 4, 3).view(), 1.0).p;
        let q = row_softmax(gaussian(4, 4, 9).view(), 1.0).p;
        assert!(js_divergence(p.view(), p.view(), 1e-8).abs() <= 4.0 * 1e-8 * 16.0);
        assert_abs_diff_eq!(
            js_divergence(p.view(), q.view(), 1e-8),
            js_divergence(q.view(), p.view(), 1e-8),
            epsilon = 1e-15
        );
        // two disjoint one-hot rows contribute ln 2 each
        let i2 = array![[1.0, 0.0], [0.0, 1.0]];
        let sw = array![[0.0, 1.0], [1.0, 0.0]];
        let v = js_divergence(i2.view(), sw.view(), 1e-15);
        assert_abs_diff_eq!(v, 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn reg_zero_on_identical_and_rotated() {
        let cfg = StructureRegConfig::default();
        let x = gaussian(16, 4, 21);
        assert!(reg_structure(x.view(), x.view(), &cfg).unwrap() < 1e-6);
        let q = random_orthonormal(4, 5);
        let xq = x.dot(&q);
        assert!(reg_structure(x.view(), xq.view(), &cfg).unwrap() < 1e-6);
    }

    #[test]
    fn reg_errors() {
        let cfg = StructureRegConfig::default();
        let x = gaussian(4, 2, 1);
        let a = gaussian(3, 2, 1);
        assert_eq!(
            reg_structure(x.view(), a.view(), &cfg),
            Err(RegError::ShapeMismatch(4, 3))
        );
        let one = gaussian(1, 2, 1);
        assert_eq!(
            reg_structure(one.view(), one.view(), &cfg),
            Err(RegError::TooFewRows(1))
        );
        let bad = StructureRegConfig {
            levels: 0,
            ..cfg
        };
        assert!(matches!(
            reg_structure(x.view(), x.view(), &bad),
            Err(RegError::InvalidConfig(_))
        ));
    }

    #[test]
    fn distance_kinds() {
        assert_eq!("rbf".parse::<DistanceKind>(), Ok(DistanceKind::Rbf));
        assert!(matches!(
            "manhattan".parse::<DistanceKind>(),
            Err(RegError::UnknownKind(_))
        ));
        let x = normalize_center(gaussian(6, 3, 2).view(), 1e-8).values;
        let cos = logits_for(x.view(), DistanceKind::CosineGram, 0.05, 1e-8);
        assert_eq!(cos, similarity_logits(x.view(), 0.05));

        let mut dup = gaussian(5, 3, 3);
        let r0 = dup.row(0).to_owned();
        dup.row_mut(3).assign(&r0);
        let k = rbf_kernel(dup.view(), median_pairwise_distance(dup.view()));
        assert_eq!(k[[0, 3]], 1.0);
        assert!(k.row(0).iter().all(|&v| v <= k[[0, 3]]));

        let y = gaussian(5, 4, 6);
        let scaled = &y * 3.5;
        assert_eq!(spearman_matrix(y.view()), spearman_matrix(scaled.view()));
        let cubed = y.mapv(|v| v * v * v);
        assert_eq!(spearman_matrix(y.view()), spearman_matrix(cubed.view()));
    }

    #[test]
    fn average_rank_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn row_mean_is_sum_over_n() {
        let x = gaussian(8, 4, 1);
        let a = gaussian(8, 3, 2);
        let sum = reg_structure(x.view(), a.view(), &StructureRegConfig::default()).unwrap();
        let mean_cfg = StructureRegConfig {
            reduction: Reduction::RowMean,
            ..Default::default()
        };
        let mean = reg_structure(x.view(), a.view(), &mean_cfg).unwrap();
        assert_abs_diff_eq!(sum / 8.0, mean, epsilon = 1e-14);
    }
}
