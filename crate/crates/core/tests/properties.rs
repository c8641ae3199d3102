use alignlite::eval;
use alignlite::select::{cka, mutual_knn, rice_k, unbiased_cka};
use alignlite::structure::{reg_structure, Reduction, StructureRegConfig};
use alignlite::synth::{gaussian, random_orthonormal};
use ndarray::Array2;
use proptest::prelude::*;

fn reg_cfg(levels: usize, tau: f64) -> StructureRegConfig {
    StructureRegConfig {
        levels,
        tau,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn regularizer_is_nonnegative_and_symmetric(
        seed in any::<u64>(), n in 3usize..14, d in 2usize..7, levels in 1usize..4, tau in 0.02f64..1.0,
    ) {
        let x = gaussian(n, d, seed);
        let a = gaussian(n, d, seed ^ 1);
        let cfg = reg_cfg(levels, tau);
        let xa = reg_structure(x.view(), a.view(), &cfg).unwrap();
        let ax = reg_structure(a.view(), x.view(), &cfg).unwrap();
        prop_assert!(xa >= 0.0);
        prop_assert!((xa - ax).abs() <= 1e-12 * xa.max(1.0));
        prop_assert!(reg_structure(x.view(), x.view(), &cfg).unwrap().abs() < 1e-12);
    }

    #[test]
    fn regularizer_ignores_rotation_and_scale(
        seed in any::<u64>(), n in 3usize..12, d in 2usize..6, c in 0.1f64..20.0,
    ) {
        let x = gaussian(n, d, seed);
        let a = gaussian(n, d + 1, seed ^ 2);
        let q = random_orthonormal(d + 1, seed ^ 3);
        let moved = a.dot(&q) * c;
        let cfg = reg_cfg(2, 0.1);
        let before = reg_structure(x.view(), a.view(), &cfg).unwrap();
        let after = reg_structure(x.view(), moved.view(), &cfg).unwrap();
        prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
    }

    #[test]
    fn summed_regularizer_is_n_times_row_mean(seed in any::<u64>(), n in 3usize..12) {
        let x = gaussian(n, 4, seed);
        let a = gaussian(n, 3, seed ^ 4);
        let mut cfg = reg_cfg(3, 0.2);
        let sum = reg_structure(x.view(), a.view(), &cfg).unwrap();
        cfg.reduction = Reduction::RowMean;
        let mean = reg_structure(x.view(), a.view(), &cfg).unwrap();
        prop_assert!((sum - n as f64 * mean).abs() <= 1e-12 * sum.max(1.0));
        prop_assert!(sum <= 4.0 * std::f64::consts::LN_2);
    }

    #[test]
    fn mutual_knn_is_a_symmetric_fraction(seed in any::<u64>(), n in 4usize..20, k in 1usize..4) {
        prop_assume!(k < n);
        let a = gaussian(n, 5, seed);
        let b = gaussian(n, 3, seed ^ 5);
        let ab = mutual_knn(a.view(), b.view(), k).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, mutual_knn(b.view(), a.view(), k).unwrap());
        prop_assert_eq!(mutual_knn(a.view(), a.view(), k).unwrap(), 1.0);
        prop_assert!(mutual_knn(a.view(), b.view(), n).is_err());
    }

    #[test]
    fn cka_is_symmetric_and_bounded(seed in any::<u64>(), n in 5usize..20, da in 1usize..6, db in 1usize..6) {
        let a = gaussian(n, da, seed);
        let b = gaussian(n, db, seed ^ 6);
        let ab = cka(a.view(), b.view()).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - cka(b.view(), a.view()).unwrap()).abs() < 1e-12);
        prop_assert!((cka(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-12);
        let u = unbiased_cka(a.view(), b.view()).unwrap();
        prop_assert!((u - unbiased_cka(b.view(), a.view()).unwrap()).abs() < 1e-9);
        prop_assert!(u <= 1.0 + 1e-9);
    }

    #[test]
    fn recall_grows_with_k(seed in any::<u64>(), n in 2usize..25) {
        let za = gaussian(n, 4, seed);
        let zb = gaussian(n, 4, seed ^ 7);
        let ks: Vec<usize> = (1..=n).collect();
        let r = eval::retrieval(za.view(), zb.view(), &ks, eval::Direction::I2T).unwrap();
        let vals: Vec<f64> = ks.iter().map(|k| r.recall_at[k]).collect();
        prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(vals[n - 1], 1.0);
    }

    #[test]
    fn neighborhood_scores_are_bounded(seed in any::<u64>(), n in 7usize..25, k in 1usize..4) {
        prop_assume!(2 * k < n);
        let x = gaussian(n, 5, seed);
        let z = gaussian(n, 3, seed ^ 8);
        let t = eval::trustworthiness(x.view(), z.view(), k).unwrap();
        let c = eval::continuity(x.view(), z.view(), k).unwrap();
        prop_assert!((0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&c));
        prop_assert_eq!(eval::trustworthiness(x.view(), x.view(), k).unwrap(), 1.0);
    }

    #[test]
    fn modality_gap_is_a_bounded_distance(seed in any::<u64>(), n in 1usize..15, d in 1usize..6) {
        let z1 = gaussian(n, d, seed);
        let z2 = gaussian(n + 2, d, seed ^ 9);
        let g = eval::modality_gap(z1.view(), z2.view()).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&g));
        prop_assert_eq!(eval::modality_gap(z1.view(), z1.view()).unwrap(), 0.0);
    }

    #[test]
    fn scaled_baseline_gives_constant_utility(c in 1.0f64..6.0, base in 0.05f64..0.5) {
        let sizes = [10.0, 20.0, 40.0, 80.0];
        let metric = |n: f64| base + 0.1 * n.ln();
        let reg: Vec<(f64, f64)> = sizes.iter().map(|&n| (n, metric(n))).collect();
        let baseline: Vec<(f64, f64)> = sizes.iter().map(|&n| (c * n, metric(n))).collect();
        let report = eval::utility(&reg, &baseline).unwrap();
        prop_assert!((report.mean - (c - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn rice_k_is_the_smallest_admissible_k(n in 1usize..200_000) {
        let k = rice_k(n);
        let admissible = |k: usize| (k as u128).pow(3) >= 8 * n as u128;
        prop_assert!(admissible(k));
        prop_assert!(k == 0 || !admissible(k - 1));
    }
}

#[test]
fn identical_points_rank_in_index_order() {
    let za = Array2::from_elem((4, 2), 1.0);
    let ranks = eval::match_ranks(za.view(), za.view()).unwrap();
    assert_eq!(ranks, vec![1, 2, 3, 4]);
}
