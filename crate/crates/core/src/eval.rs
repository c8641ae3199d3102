//! Downstream and diagnostic metrics: zero-shot classification, retrieval,
//! neighborhood preservation, utility, modality gap and the bound
//! calculators for the regularizer.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::store::EmbeddingMatrix;
use crate::structure::{reg_structure, RegError, Reduction, StructureRegConfig};
use crate::synth::gaussian_from;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("k={k} out of range for N={n} (need 1 <= k < N/2)")]
    KOutOfRange { k: usize, n: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("{labels} labels for {rows} prototype rows")]
    LabelCountMismatch { labels: usize, rows: usize },
    #[error("confidence delta must lie in (0, 1), got {0}")]
    DeltaOutOfRange(f64),
    #[error("sample count must be at least 1")]
    InvalidN,
    #[error("no point of the regularized curve can be matched on the baseline")]
    EmptyOverlap,
    #[error("curve is empty or has non-finite entries")]
    InvalidCurve,
    #[error("mapped prototypes are not finite")]
    NonFinitePrototypes,
    #[error(transparent)]
    Reg(#[from] RegError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn same_shape(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(EvalError::ShapeMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Rows scaled to unit length; all-zero rows stay zero.
pub fn unit_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
    out
}

/// `cos(q_i, g_j)` for every pair.
pub fn cosine_matrix(q: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>) -> Array2<f64> {
    unit_rows(q).dot(&unit_rows(g).t())
}

/// Indices sorted by descending score, lower index first among equals.
fn ranked(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.collect();
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    labels: Vec<String>,
    prototypes: EmbeddingMatrix,
}

impl ClassPrototypes {
    pub fn new(labels: Vec<String>, prototypes: EmbeddingMatrix) -> Result<Self> {
        if labels.len() != prototypes.rows() {
            return Err(EvalError::LabelCountMismatch {
                labels: labels.len(),
                rows: prototypes.rows(),
            });
        }
        if labels.len() < 2 {
            return Err(EvalError::TooFewClasses(labels.len()));
        }
        Ok(Self { labels, prototypes })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn prototypes(&self) -> &EmbeddingMatrix {
        &self.prototypes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same labels, prototypes replaced (e.g. after mapping into the shared space).
    pub fn map(&self, f: impl FnOnce(ArrayView2<'_, f64>) -> Array2<f64>) -> Result<Self> {
        let mapped = EmbeddingMatrix::from_array(f(self.prototypes.data().view()))
            .map_err(|_| EvalError::NonFinitePrototypes)?;
        Self::new(self.labels.clone(), mapped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub top1: f64,
    /// Present only with at least 5 classes.
    pub top5: Option<f64>,
    pub predictions: Vec<usize>,
}

/// Cosine argmax over class prototypes; ties go to the lower class index.
pub fn zero_shot_classify(
    images: ArrayView2<'_, f64>,
    prototypes: &ClassPrototypes,
    true_labels: &[usize],
) -> Result<ZeroShotReport> {
    let protos = prototypes.prototypes.data();
    if images.ncols() != protos.ncols() || images.nrows() != true_labels.len() {
        return Err(EvalError::ShapeMismatch {
            left: images.dim(),
            right: (true_labels.len(), protos.ncols()),
        });
    }
    let c = prototypes.len();
    if let Some(&label) = true_labels.iter().find(|&&l| l >= c) {
        return Err(EvalError::LabelOutOfRange { label, classes: c });
    }
    let sims = cosine_matrix(images, protos.view());
    let mut hit1 = 0usize;
    let mut hit5 = 0usize;
    let mut predictions = Vec::with_capacity(images.nrows());
    for (row, &label) in sims.axis_iter(Axis(0)).zip(true_labels) {
        let order = ranked(row.iter().copied());
        predictions.push(order[0]);
        hit1 += usize::from(order[0] == label);
        hit5 += usize::from(order.iter().take(5).any(|&j| j == label));
    }
    let n = images.nrows().max(1) as f64;
    Ok(ZeroShotReport {
        top1: hit1 as f64 / n,
        top5: (c >= 5).then(|| hit5 as f64 / n),
        predictions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    I2T,
    T2I,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub n: usize,
    pub recall_at: BTreeMap<usize, f64>,
}

/// 1-based rank of the true match for every query.
pub fn match_ranks(q: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    same_shape(q, g)?;
    let sims = cosine_matrix(q, g);
    Ok(sims
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| {
            let own = row[i];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > own || (s == own && j < i))
                .count()
        })
        .collect())
}

/// Recall@k of gallery row `i` for query row `i`.
pub fn retrieval(
    q: ArrayView2<'_, f64>,
    g: ArrayView2<'_, f64>,
    ks: &[usize],
    direction: Direction,
) -> Result<RetrievalReport> {
    if ks.contains(&0) {
        return Err(EvalError::InvalidK);
    }
    let ranks = match_ranks(q, g)?;
    let n = ranks.len();
    let recall_at = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            (k, hits as f64 / n.max(1) as f64)
        })
        .collect();
    Ok(RetrievalReport { direction, n, recall_at })
}

/// Image-to-text and text-to-image reports.
pub fn cross_modal_retrieval(
    za: ArrayView2<'_, f64>,
    zb: ArrayView2<'_, f64>,
    ks: &[usize],
) -> Result<[RetrievalReport; 2]> {
    Ok([
        retrieval(za, zb, ks, Direction::I2T)?,
        retrieval(zb, za, ks, Direction::T2I)?,
    ])
}

/// Mean of I2T and T2I R@1.
pub fn mean_r1(za: ArrayView2<'_, f64>, zb: ArrayView2<'_, f64>) -> Result<f64> {
    let [i2t, t2i] = cross_modal_retrieval(za, zb, &[1])?;
    Ok(0.5 * (i2t.recall_at[&1] + t2i.recall_at[&1]))
}

/// Neighbor order of every point by cosine distance, self excluded,
/// lower index first among equals.
fn neighbor_orders(x: ArrayView2<'_, f64>) -> Vec<Vec<usize>> {
    let sims = cosine_matrix(x, x);
    sims.axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| {
            ranked(row.iter().copied())
                .into_iter()
                .filter(|&j| j != i)
                .collect()
        })
        .collect()
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || 2 * k >= n {
        return Err(EvalError::KOutOfRange { k, n });
    }
    Ok(())
}

/// Penalizes points that are k-neighbors in `aligned` but not in `original`,
/// weighted by their rank excess in `original`.
pub fn trustworthiness(original: ArrayView2<'_, f64>, aligned: ArrayView2<'_, f64>, k: usize) -> Result<f64> {
    let n = original.nrows();
    if aligned.nrows() != n {
        return Err(EvalError::ShapeMismatch {
            left: original.dim(),
            right: aligned.dim(),
        });
    }
    check_k(n, k)?;
    let orig = neighbor_orders(original);
    let emb = neighbor_orders(aligned);
    let mut penalty = 0.0;
    let mut rank = vec![0usize; n];
    for i in 0..n {
        for (r, &j) in orig[i].iter().enumerate() {
            rank[j] = r + 1;
        }
        for &j in &emb[i][..k] {
            if rank[j] > k {
                penalty += (rank[j] - k) as f64;
            }
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    Ok(1.0 - 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0)) * penalty)
}

/// Penalizes original k-neighbors lost in `aligned`.
pub fn continuity(original: ArrayView2<'_, f64>, aligned: ArrayView2<'_, f64>, k: usize) -> Result<f64> {
    trustworthiness(aligned, original, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityStatus {
    Matched,
    /// The baseline never reaches this metric value.
    NotReached,
    /// The baseline already exceeds it at its smallest size, so the
    /// crossing lies outside the measured range.
    BelowRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityPoint {
    pub n: f64,
    pub metric: f64,
    pub n_hat: Option<f64>,
    pub utility: Option<f64>,
    pub status: UtilityStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub mean: f64,
    pub points: Vec<UtilityPoint>,
}

fn sorted_curve(curve: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    if curve.is_empty() || curve.iter().any(|&(n, m)| !(n.is_finite() && m.is_finite() && n > 0.0)) {
        return Err(EvalError::InvalidCurve);
    }
    let mut c = curve.to_vec();
    c.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(c)
}

/// Smallest sample count at which the piecewise-linear baseline reaches `m`.
fn baseline_crossing(base: &[(f64, f64)], m: f64) -> std::result::Result<f64, UtilityStatus> {
    let (n0, m0) = base[0];
    if m0 > m {
        return Err(UtilityStatus::BelowRange);
    }
    if m0 == m {
        return Ok(n0);
    }
    for w in base.windows(2) {
        let ((na, ma), (nb, mb)) = (w[0], w[1]);
        if ma < m && mb >= m {
            return Ok(na + (m - ma) / (mb - ma) * (nb - na));
        }
    }
    Err(UtilityStatus::NotReached)
}

/// Mean of `N_hat / N - 1` over the regularized curve, where `N_hat` is the
/// baseline sample count needed to match the regularized metric at `N`.
/// Points the baseline cannot match are kept in the report but skipped in
/// the mean.
pub fn utility(curve_reg: &[(f64, f64)], curve_base: &[(f64, f64)]) -> Result<UtilityReport> {
    let reg = sorted_curve(curve_reg)?;
    let base = sorted_curve(curve_base)?;
    let points: Vec<UtilityPoint> = reg
        .iter()
        .map(|&(n, metric)| match baseline_crossing(&base, metric) {
            Ok(n_hat) => UtilityPoint {
                n,
                metric,
                n_hat: Some(n_hat),
                utility: Some(n_hat / n - 1.0),
                status: UtilityStatus::Matched,
            },
            Err(status) => UtilityPoint {
                n,
                metric,
                n_hat: None,
                utility: None,
                status,
            },
        })
        .collect();
    let used: Vec<f64> = points.iter().filter_map(|p| p.utility).collect();
    if used.is_empty() {
        return Err(EvalError::EmptyOverlap);
    }
    Ok(UtilityReport {
        mean: used.iter().sum::<f64>() / used.len() as f64,
        points,
    })
}

/// Distance between the means of the unit-normalized embeddings.
pub fn modality_gap(z1: ArrayView2<'_, f64>, z2: ArrayView2<'_, f64>) -> Result<f64> {
    if z1.ncols() != z2.ncols() || z1.nrows() == 0 || z2.nrows() == 0 {
        return Err(EvalError::ShapeMismatch {
            left: z1.dim(),
            right: z2.dim(),
        });
    }
    let m1 = unit_rows(z1).mean_axis(Axis(0)).expect("nonempty");
    let m2 = unit_rows(z2).mean_axis(Axis(0)).expect("nonempty");
    let d = m1 - m2;
    Ok(d.dot(&d).sqrt())
}

/// Worst-case change of the row-averaged regularizer when one pair is
/// replaced: `4 ln 2 / N`.
pub fn sensitivity_bound(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(EvalError::InvalidN);
    }
    Ok(4.0 * std::f64::consts::LN_2 / n as f64)
}

/// Deviation `eps` such that the empirical regularizer is within `eps` of
/// its expectation with probability at least `1 - delta`.
pub fn mcdiarmid_bound(n: usize, delta: f64) -> Result<f64> {
    if n == 0 {
        return Err(EvalError::InvalidN);
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(EvalError::DeltaOutOfRange(delta));
    }
    Ok(2.0 * 2f64.sqrt() * std::f64::consts::LN_2 * ((2.0 / delta).ln() / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n: usize,
    pub delta_n: f64,
    pub mcdiarmid_eps: f64,
    pub confidence: f64,
}

impl BoundReport {
    pub fn new(n: usize, confidence: f64) -> Result<Self> {
        Ok(Self {
            n,
            delta_n: sensitivity_bound(n)?,
            mcdiarmid_eps: mcdiarmid_bound(n, confidence)?,
            confidence,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub n: usize,
    pub trials: usize,
    pub max_delta: f64,
    /// `sensitivity_bound(N)`, multiplied by `N` for the summed reduction.
    pub bound: f64,
    pub reduction: Reduction,
}

impl SensitivityReport {
    pub fn within_bound(&self) -> bool {
        self.max_delta <= self.bound
    }
}

/// Change of the regularizer when row pair `i` is replaced by `(new_x, new_a)`.
pub fn replace_pair_delta(
    x: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    cfg: &StructureRegConfig,
    i: usize,
    new_x: ArrayView1<'_, f64>,
    new_a: ArrayView1<'_, f64>,
) -> Result<f64> {
    let base = reg_structure(x, a, cfg)?;
    let (mut x2, mut a2) = (x.to_owned(), a.to_owned());
    x2.row_mut(i).assign(&new_x);
    a2.row_mut(i).assign(&new_a);
    Ok((reg_structure(x2.view(), a2.view(), cfg)? - base).abs())
}

/// Replace one random row pair of `(x, a)` with fresh Gaussian rows,
/// `trials` times, and record the largest change of the regularizer.
/// The fresh rows are scaled to the RMS row norm of their matrix.
pub fn empirical_sensitivity(
    x: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    cfg: &StructureRegConfig,
    trials: usize,
    seed: u64,
) -> Result<SensitivityReport> {
    let n = x.nrows();
    let base = reg_structure(x, a, cfg)?;
    let rms = |m: ArrayView2<'_, f64>| (m.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let scaled = |r: Array2<f64>, s: f64| {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        r * (s / norm)
    };
    let (sx, sa) = (rms(x), rms(a));
    let mut rng = rng::stream(seed, "sensitivity");
    let mut max_delta = 0.0f64;
    let (mut x2, mut a2) = (x.to_owned(), a.to_owned());
    for _ in 0..trials {
        let i = rng.random_range(0..n);
        let fx = scaled(gaussian_from(&mut rng, 1, x.ncols()), sx);
        let fa = scaled(gaussian_from(&mut rng, 1, a.ncols()), sa);
        x2.row_mut(i).assign(&fx.row(0));
        a2.row_mut(i).assign(&fa.row(0));
        let changed = reg_structure(x2.view(), a2.view(), cfg)?;
        max_delta = max_delta.max((changed - base).abs());
        x2.row_mut(i).assign(&x.row(i));
        a2.row_mut(i).assign(&a.row(i));
    }
    let per_row = sensitivity_bound(n)?;
    let bound = match cfg.reduction {
        Reduction::RowMean => per_row,
        Reduction::Sum => per_row * n as f64,
    };
    Ok(SensitivityReport {
        n,
        trials,
        max_delta,
        bound,
        reduction: cfg.reduction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gaussian, random_orthonormal};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, s};

    #[test]
    fn retrieval_identity_and_reversed() {
        let z = Array2::<f64>::eye(4);
        let r = retrieval(z.view(), z.view(), &[1, 4], Direction::I2T).unwrap();
        assert_eq!(r.recall_at[&1], 1.0);
        let rev = z.slice(s![..;-1, ..]).to_owned();
        let r = retrieval(z.view(), rev.view(), &[1, 4], Direction::I2T).unwrap();
        assert_eq!(r.recall_at[&1], 0.0);
        assert_eq!(r.recall_at[&4], 1.0);
        assert!(retrieval(z.view(), rev.view(), &[0], Direction::I2T).is_err());
    }

    #[test]
    fn retrieval_ties_prefer_lower_index() {
        // every gallery row identical: query i ranks its match at i + 1
        let q = gaussian(3, 2, 1);
        let g = Array2::from_elem((3, 2), 1.0);
        assert_eq!(match_ranks(q.view(), g.view()).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn zero_shot_on_own_embeddings() {
        let x = gaussian(6, 4, 2);
        let p = ClassPrototypes::new(
            (0..6).map(|i| format!("c{i}")).collect(),
            EmbeddingMatrix::from_array(x.clone()).unwrap(),
        )
        .unwrap();
        let r = zero_shot_classify(x.view(), &p, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.top5, Some(1.0));
        assert_eq!(
            zero_shot_classify(x.view(), &p, &[0, 1, 2, 3, 4, 6]),
            Err(EvalError::LabelOutOfRange { label: 6, classes: 6 })
        );
    }

    #[test]
    fn zero_shot_orthogonal_ties_pick_class_zero() {
        let x = array![[0.0, 0.0, 1.0], [0.0, 0.0, -2.0]];
        let p = ClassPrototypes::new(
            vec!["a".into(), "b".into()],
            EmbeddingMatrix::from_array(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let r = zero_shot_classify(x.view(), &p, &[1, 0]).unwrap();
        assert_eq!(r.predictions, vec![0, 0]);
        assert_eq!(r.top1, 0.5);
        assert_eq!(r.top5, None);
    }

    #[test]
    fn neighborhood_metrics_on_rotations() {
        let x = gaussian(20, 4, 3);
        let q = random_orthonormal(4, 4);
        let y = x.dot(&q);
        assert_abs_diff_eq!(trustworthiness(x.view(), x.view(), 3).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(trustworthiness(x.view(), y.view(), 3).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(continuity(x.view(), y.view(), 3).unwrap(), 1.0, epsilon = 1e-12);
        assert!(trustworthiness(x.view(), y.view(), 10).is_err());
        assert!(trustworthiness(x.view(), y.view(), 0).is_err());
    }

    #[test]
    fn utility_fixtures() {
        let base = [(50.0, 0.2), (100.0, 0.4), (200.0, 0.6), (400.0, 0.8)];
        assert_abs_diff_eq!(utility(&base, &base).unwrap().mean, 0.0, epsilon = 1e-12);
        let doubled: Vec<_> = base.iter().map(|&(n, m)| (n / 2.0, m)).collect();
        assert_abs_diff_eq!(utility(&doubled, &base).unwrap().mean, 1.0, epsilon = 1e-9);
        let high = [(50.0, 0.95)];
        assert_eq!(utility(&high, &base), Err(EvalError::EmptyOverlap));
        let r = utility(&[(10.0, 0.1), (50.0, 0.5)], &base).unwrap();
        assert_eq!(r.points[0].status, UtilityStatus::BelowRange);
        assert_abs_diff_eq!(r.mean, 150.0 / 50.0 - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn modality_gap_cases() {
        let z = gaussian(5, 3, 9);
        assert_eq!(modality_gap(z.view(), z.view()).unwrap(), 0.0);
        let mu = unit_rows(z.view()).mean_axis(Axis(0)).unwrap();
        let neg = -&z;
        let gap = modality_gap(z.view(), neg.view()).unwrap();
        assert_abs_diff_eq!(gap, 2.0 * mu.dot(&mu).sqrt(), epsilon = 1e-12);
        assert!(modality_gap(z.view(), gaussian(5, 2, 1).view()).is_err());
    }

    #[test]
    fn bound_values() {
        assert_abs_diff_eq!(sensitivity_bound(100).unwrap(), 0.0277259, epsilon = 1e-7);
        assert_abs_diff_eq!(sensitivity_bound(16).unwrap(), 0.173287, epsilon = 1e-6);
        assert_abs_diff_eq!(mcdiarmid_bound(10_000, 0.05).unwrap(), 0.0376, epsilon = 1e-4);
        let e1 = mcdiarmid_bound(100, 0.1).unwrap();
        let e4 = mcdiarmid_bound(400, 0.1).unwrap();
        assert_abs_diff_eq!(e1 / e4, 2.0, epsilon = 1e-12);
        assert_eq!(mcdiarmid_bound(10, 1.0), Err(EvalError::DeltaOutOfRange(1.0)));
        assert_eq!(sensitivity_bound(0), Err(EvalError::InvalidN));
    }

    #[test]
    fn self_replacement_changes_nothing() {
        let x = gaussian(8, 3, 1);
        let a = gaussian(8, 2, 2);
        let cfg = StructureRegConfig::default();
        for i in [0, 5] {
            let d = replace_pair_delta(x.view(), a.view(), &cfg, i, x.row(i), a.row(i)).unwrap();
            assert_eq!(d, 0.0);
        }
    }
}
