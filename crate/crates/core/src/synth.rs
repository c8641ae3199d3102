//! Seeded synthetic data: Gaussian matrices, random orthonormal maps, and
//! paired modalities generated from a shared latent.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng;
use crate::store::{EmbeddingMatrix, PairedDataset, Result};

pub fn gaussian_from(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Standard-normal `rows x cols` matrix from a seed.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    gaussian_from(&mut rng::stream(seed, "gaussian"), rows, cols)
}

/// Orthonormalize the columns of `m` in place (modified Gram-Schmidt).
/// Requires `rows >= cols` and full column rank.
pub fn orthonormalize_columns(m: &mut Array2<f64>) {
    let cols = m.ncols();
    for j in 0..cols {
        for i in 0..j {
            let proj = m.column(i).dot(&m.column(j));
            let ci = m.column(i).to_owned();
            m.column_mut(j).scaled_add(-proj, &ci);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
}

/// Random `d x d` orthonormal matrix.
pub fn random_orthonormal(d: usize, seed: u64) -> Array2<f64> {
    let mut m = gaussian_from(&mut rng::stream(seed, "orthonormal"), d, d);
    orthonormalize_columns(&mut m);
    m
}

/// Random matrix with orthonormal rows (`rows <= cols`) or columns
/// (`rows > cols`).
pub fn semi_orthogonal(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    if rows >= cols {
        let mut m = gaussian_from(rng, rows, cols);
        orthonormalize_columns(&mut m);
        m
    } else {
        let mut m = gaussian_from(rng, cols, rows);
        orthonormalize_columns(&mut m);
        m.reversed_axes()
    }
}

/// Shared-latent generator: `z ~ N(0, I_latent)`, each modality is
/// `z M + noise` with a fixed Gaussian map `M` and isotropic noise whose
/// standard deviation is `noise` times the RMS of the clean signal.
#[derive(Debug, Clone)]
pub struct LatentPairGenerator {
    pub latent_dim: usize,
    pub map_a: Array2<f64>,
    pub map_b: Array2<f64>,
    pub noise: f64,
}

impl LatentPairGenerator {
    pub fn new(latent_dim: usize, d_a: usize, d_b: usize, noise: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, "latent-maps");
        Self {
            latent_dim,
            map_a: gaussian_from(&mut r, latent_dim, d_a),
            map_b: gaussian_from(&mut r, latent_dim, d_b),
            noise,
        }
    }

    fn modality(&self, z: &Array2<f64>, map: &Array2<f64>, rng: &mut impl Rng) -> Array2<f64> {
        let clean = z.dot(map);
        let rms = (clean.mapv(|v| v * v).sum() / clean.len() as f64).sqrt();
        let noise = gaussian_from(rng, clean.nrows(), clean.ncols()) * (self.noise * rms);
        clean + noise
    }

    /// `n` fresh pairs with ids `{prefix}{i}`.
    pub fn sample(&self, n: usize, seed: u64, prefix: &str) -> Result<PairedDataset> {
        let mut r = rng::stream(seed, "latent-samples");
        let z = gaussian_from(&mut r, n, self.latent_dim);
        let a = self.modality(&z, &self.map_a, &mut r);
        let b = self.modality(&z, &self.map_b, &mut r);
        let ids = (0..n).map(|i| format!("{prefix}{i}")).collect();
        crate::store::compose_paired(
            EmbeddingMatrix::from_array(a)?,
            EmbeddingMatrix::from_array(b)?,
            ids,
        )
    }
}

/// Per-column means; handy in tests.
pub fn column_means(m: &Array2<f64>) -> Vec<f64> {
    m.mean_axis(Axis(0)).map(|v| v.to_vec()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn orthonormal_is_orthonormal() {
        let q = random_orthonormal(6, 3);
        assert_abs_diff_eq!(q.t().dot(&q), Array2::eye(6), epsilon = 1e-12);
        let mut r = rng::stream(1, "t");
        let w = semi_orthogonal(&mut r, 3, 7);
        assert_abs_diff_eq!(w.dot(&w.t()), Array2::eye(3), epsilon = 1e-12);
    }

    #[test]
    fn latent_pairs_are_deterministic() {
        let g = LatentPairGenerator::new(8, 32, 48, 0.05, 1);
        let a = g.sample(10, 2, "s").unwrap();
        let b = g.sample(10, 2, "s").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), (32, 48));
    }
}
