//! Representational similarity between encoder layers and the choice of
//! which layer pair to align.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::cosine_matrix;
use crate::rng::child_seed;
use crate::store::{permutation, LayerBank};
use crate::structure::column_center;

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("k={k} must satisfy 1 <= k < N={n}")]
    KTooLarge { k: usize, n: usize },
    #[error("row counts differ: {0} vs {1}")]
    RowMismatch(usize, usize),
    #[error("need at least {need} rows, got {got}")]
    NTooSmall { need: usize, got: usize },
    #[error("degenerate input: zero normalizer")]
    DegenerateInput,
    #[error("layer banks disagree on sample ids: {0}")]
    IdMismatch(String),
    #[error("sample_count {count} out of range for {n} samples")]
    SampleCount { count: usize, n: usize },
    #[error("grid is empty")]
    EmptyGrid,
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("repeats must be at least 1")]
    NoRepeats,
}

pub type Result<T> = std::result::Result<T, SelectError>;

/// Smallest `k` with `k >= 2 * N^(1/3)`, computed as the smallest `k` with
/// `k^3 >= 8N` to avoid floating-point cube roots.
pub fn rice_k(n: usize) -> usize {
    let target = 8u128 * n as u128;
    let mut k = ((2.0 * (n as f64).cbrt()).ceil() as u128).saturating_sub(2);
    while k * k * k < target {
        k += 1;
    }
    k as usize
}

/// Indices of the `k` most cosine-similar rows, self excluded, lower index
/// first among equals.
pub fn knn_indices(x: ArrayView2<'_, f64>, k: usize) -> Vec<Vec<usize>> {
    let sims = cosine_matrix(x, x);
    sims.axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| {
            let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != i).collect();
            idx.sort_by(|&p, &q| row[q].total_cmp(&row[p]).then(p.cmp(&q)));
            idx.truncate(k);
            idx
        })
        .collect()
}

/// Mean fraction of shared k-nearest neighbors across the two spaces.
pub fn mutual_knn(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, k: usize) -> Result<f64> {
    let n = a.nrows();
    if b.nrows() != n {
        return Err(SelectError::RowMismatch(n, b.nrows()));
    }
    if k == 0 || k >= n {
        return Err(SelectError::KTooLarge { k, n });
    }
    let na = knn_indices(a, k);
    let nb = knn_indices(b, k);
    let mut mark = vec![false; n];
    let mut total = 0usize;
    for (ra, rb) in na.iter().zip(&nb) {
        for &j in ra {
            mark[j] = true;
        }
        total += rb.iter().filter(|&&j| mark[j]).count();
        for &j in ra {
            mark[j] = false;
        }
    }
    Ok(total as f64 / (n * k) as f64)
}

fn frob2(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA on column-centered inputs.
pub fn cka(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    let n = a.nrows();
    if b.nrows() != n {
        return Err(SelectError::RowMismatch(n, b.nrows()));
    }
    if n < 2 {
        return Err(SelectError::NTooSmall { need: 2, got: n });
    }
    let ac = column_center(a);
    let bc = column_center(b);
    let cross = frob2(&bc.t().dot(&ac));
    let denom = frob2(&ac.t().dot(&ac)).sqrt() * frob2(&bc.t().dot(&bc)).sqrt();
    if denom <= 0.0 || !denom.is_finite() {
        return Err(SelectError::DegenerateInput);
    }
    Ok(cross / denom)
}

/// Unbiased HSIC estimator of two Gram matrices.
fn hsic1(k: &Array2<f64>, l: &Array2<f64>) -> f64 {
    let n = k.nrows() as f64;
    let mut kt = k.clone();
    let mut lt = l.clone();
    kt.diag_mut().fill(0.0);
    lt.diag_mut().fill(0.0);
    let trace: f64 = (&kt * &lt).sum();
    let ks = kt.sum_axis(Axis(0));
    let ls = lt.sum_axis(Axis(0));
    let middle = kt.sum() * lt.sum() / ((n - 1.0) * (n - 2.0));
    let last = 2.0 / (n - 2.0) * ks.dot(&ls);
    (trace + middle - last) / (n * (n - 3.0))
}

/// CKA built from the unbiased HSIC estimator on linear kernels. The value
/// can be slightly negative for unrelated inputs.
pub fn unbiased_cka(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    let n = a.nrows();
    if b.nrows() != n {
        return Err(SelectError::RowMismatch(n, b.nrows()));
    }
    if n < 4 {
        return Err(SelectError::NTooSmall { need: 4, got: n });
    }
    let k = a.dot(&a.t());
    let l = b.dot(&b.t());
    let kl = hsic1(&k, &l);
    let kk = hsic1(&k, &k);
    let ll = hsic1(&l, &l);
    if !(kk > 0.0 && ll > 0.0) {
        return Err(SelectError::DegenerateInput);
    }
    Ok(kl / (kk * ll).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityMetric {
    /// Mutual kNN with `k = rice_k(N)`, capped at `N - 1`.
    MutualKnnRice,
    MutualKnn(usize),
    Cka,
    UnbiasedCka,
}

impl SimilarityMetric {
    pub fn score(self, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
        match self {
            Self::MutualKnnRice => {
                let n = a.nrows();
                mutual_knn(a, b, rice_k(n).min(n.saturating_sub(1)))
            }
            Self::MutualKnn(k) => mutual_knn(a, b, k),
            Self::Cka => cka(a, b),
            Self::UnbiasedCka => unbiased_cka(a, b),
        }
    }
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MutualKnnRice => f.write_str("mutual_knn_rice"),
            Self::MutualKnn(k) => write!(f, "mutual_knn_k{k}"),
            Self::Cka => f.write_str("cka"),
            Self::UnbiasedCka => f.write_str("unbiased_cka"),
        }
    }
}

impl FromStr for SimilarityMetric {
    type Err = SelectError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mutual_knn_rice" | "mutual_knn" => Ok(Self::MutualKnnRice),
            "cka" => Ok(Self::Cka),
            "unbiased_cka" => Ok(Self::UnbiasedCka),
            other => other
                .strip_prefix("mutual_knn_k")
                .and_then(|k| k.parse().ok())
                .map(Self::MutualKnn)
                .ok_or_else(|| SelectError::UnknownMetric(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub layer_a: usize,
    pub layer_b: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGrid {
    pub metric: String,
    pub sample_count: usize,
    pub seed: u64,
    pub cells: Vec<GridCell>,
}

/// Sorted subsample of `count` out of `n` indices; all rows when `count == n`.
pub fn sample_rows(n: usize, count: usize, seed: u64) -> Vec<usize> {
    if count == n {
        return (0..n).collect();
    }
    let mut idx = permutation(n, seed, "layer-select");
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

/// Score every `(layer_a, layer_b)` pair on the same `sample_count` rows.
pub fn build_grid(
    bank_a: &LayerBank,
    bank_b: &LayerBank,
    metric: SimilarityMetric,
    sample_count: usize,
    seed: u64,
) -> Result<SimilarityGrid> {
    if bank_a.sample_ids() != bank_b.sample_ids() {
        let first = bank_a
            .sample_ids()
            .iter()
            .zip(bank_b.sample_ids())
            .position(|(x, y)| x != y)
            .unwrap_or(bank_a.len().min(bank_b.len()));
        return Err(SelectError::IdMismatch(format!("first difference at row {first}")));
    }
    let n = bank_a.len();
    if sample_count == 0 || sample_count > n {
        return Err(SelectError::SampleCount { count: sample_count, n });
    }
    let idx = sample_rows(n, sample_count, seed);
    let sub = |m: &Array2<f64>| m.select(Axis(0), &idx);
    let subs_b: Vec<(usize, Array2<f64>)> = bank_b.layers().iter().map(|(l, m)| (*l, sub(m.data()))).collect();
    let mut cells = Vec::with_capacity(bank_a.layers().len() * subs_b.len());
    for (la, ma) in bank_a.layers() {
        let xa = sub(ma.data());
        for (lb, xb) in &subs_b {
            cells.push(GridCell {
                layer_a: *la,
                layer_b: *lb,
                score: metric.score(xa.view(), xb.view())?,
            });
        }
    }
    Ok(SimilarityGrid {
        metric: metric.to_string(),
        sample_count,
        seed,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub best_pair: (usize, usize),
    pub score: f64,
    pub tie_policy_applied: bool,
}

/// Highest-scoring pair. Among equal scores the deepest `layer_a` wins,
/// then the deepest `layer_b`.
pub fn select(grid: &SimilarityGrid) -> Result<SelectionResult> {
    let best = grid
        .cells
        .iter()
        .map(|c| c.score)
        .max_by(f64::total_cmp)
        .ok_or(SelectError::EmptyGrid)?;
    let winners: Vec<&GridCell> = grid.cells.iter().filter(|c| c.score == best).collect();
    let top = winners
        .iter()
        .max_by_key(|c| (c.layer_a, c.layer_b))
        .expect("nonempty");
    Ok(SelectionResult {
        best_pair: (top.layer_a, top.layer_b),
        score: best,
        tie_policy_applied: winners.len() > 1,
    })
}

/// How often each pair is selected over `repeats` independent subsamples.
pub fn selection_consistency(
    bank_a: &LayerBank,
    bank_b: &LayerBank,
    metric: SimilarityMetric,
    sample_count: usize,
    repeats: usize,
    seed: u64,
) -> Result<BTreeMap<(usize, usize), usize>> {
    if repeats == 0 {
        return Err(SelectError::NoRepeats);
    }
    let mut hist = BTreeMap::new();
    for r in 0..repeats {
        let grid = build_grid(bank_a, bank_b, metric, sample_count, child_seed(seed, r as u64))?;
        *hist.entry(select(&grid)?.best_pair).or_insert(0) += 1;
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::EmbeddingMatrix;
    use crate::synth::{gaussian, random_orthonormal};
    use approx::assert_abs_diff_eq;

    fn bank(mats: Vec<(usize, Array2<f64>)>) -> LayerBank {
        let n = mats[0].1.nrows();
        LayerBank::new(
            mats.into_iter()
                .map(|(l, m)| (l, EmbeddingMatrix::from_array(m).unwrap()))
                .collect(),
            (0..n).map(|i| format!("s{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rice_values() {
        assert_eq!(rice_k(1), 2);
        assert_eq!(rice_k(8), 4);
        assert_eq!(rice_k(5000), 35);
        assert_eq!(rice_k(27), 6);
        assert_eq!(rice_k(28), 7);
    }

    #[test]
    fn mutual_knn_identity_and_rotation() {
        let x = gaussian(20, 5, 1);
        let q = random_orthonormal(5, 2);
        assert_eq!(mutual_knn(x.view(), x.view(), 4).unwrap(), 1.0);
        assert_eq!(mutual_knn(x.view(), x.dot(&q).view(), 4).unwrap(), 1.0);
        assert_eq!(
            mutual_knn(x.view(), x.view(), 20),
            Err(SelectError::KTooLarge { k: 20, n: 20 })
        );
    }

    #[test]
    fn cka_identities() {
        let x = gaussian(30, 6, 3);
        let q = random_orthonormal(6, 4);
        assert_abs_diff_eq!(cka(x.view(), x.view()).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cka(x.view(), (x.dot(&q) * 3.5).view()).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(unbiased_cka(x.view(), x.view()).unwrap(), 1.0, epsilon = 1e-9);
        assert_eq!(
            unbiased_cka(x.slice(ndarray::s![..3, ..]), x.slice(ndarray::s![..3, ..])),
            Err(SelectError::NTooSmall { need: 4, got: 3 })
        );
        let flat = Array2::<f64>::ones((5, 2));
        assert_eq!(cka(flat.view(), x.slice(ndarray::s![..5, ..])), Err(SelectError::DegenerateInput));
    }

    #[test]
    fn grid_and_selection() {
        let shared = gaussian(12, 4, 7);
        let a = bank(vec![(1, gaussian(12, 4, 1)), (2, shared.clone())]);
        let b = bank(vec![(1, shared), (5, gaussian(12, 3, 2))]);
        let grid = build_grid(&a, &b, SimilarityMetric::Cka, 12, 0).unwrap();
        assert_eq!(grid.cells.len(), 4);
        let sel = select(&grid).unwrap();
        assert_eq!(sel.best_pair, (2, 1));
        assert_abs_diff_eq!(sel.score, 1.0, epsilon = 1e-12);
        let hist = selection_consistency(&a, &b, SimilarityMetric::Cka, 4, 5, 3).unwrap();
        assert_eq!(hist.get(&(2, 1)), Some(&5));
    }

    #[test]
    fn select_ties_and_empty() {
        let cells = |v: &[(usize, usize, f64)]| SimilarityGrid {
            metric: "cka".into(),
            sample_count: 1,
            seed: 0,
            cells: v
                .iter()
                .map(|&(layer_a, layer_b, score)| GridCell { layer_a, layer_b, score })
                .collect(),
        };
        let r = select(&cells(&[(0, 0, 0.3), (1, 1, 0.9)])).unwrap();
        assert_eq!(r.best_pair, (1, 1));
        assert!(!r.tie_policy_applied);
        let r = select(&cells(&[(0, 3, 0.5), (2, 0, 0.5), (2, 1, 0.5), (1, 4, 0.5)])).unwrap();
        assert_eq!(r.best_pair, (2, 1));
        assert!(r.tie_policy_applied);
        assert_eq!(select(&cells(&[])), Err(SelectError::EmptyGrid));
    }

    #[test]
    fn metric_names_round_trip() {
        for m in [
            SimilarityMetric::MutualKnnRice,
            SimilarityMetric::MutualKnn(10),
            SimilarityMetric::Cka,
            SimilarityMetric::UnbiasedCka,
        ] {
            assert_eq!(m.to_string().parse::<SimilarityMetric>().unwrap(), m);
        }
        assert!("pearson".parse::<SimilarityMetric>().is_err());
    }
}
