use alignlite::rng::child_seed;
use alignlite::store::{self, Dtype, EmbeddingMatrix, PairedDataset, SplitSpec, StoreError};
use alignlite::synth::gaussian;
use ndarray::Array2;
use proptest::collection::vec;
use proptest::prelude::*;
use std::collections::HashSet;

fn matrix(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
    EmbeddingMatrix::from_array(gaussian(n, d, seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn emb1_round_trips(n in 1usize..12, d in 1usize..9, seed in any::<u64>(), with_ids in any::<bool>()) {
        let m = matrix(n, d, seed);
        let ids: Vec<String> = (0..n).map(|i| format!("éx{i}")).collect();
        let bytes = store::encode_emb1(&m, with_ids.then_some(&ids[..])).unwrap();
        let back = store::decode_emb1(&bytes).unwrap();
        prop_assert_eq!(&back.matrix, &m);
        prop_assert_eq!(back.ids, with_ids.then(|| ids.clone()));
    }

    #[test]
    fn f32_files_keep_f32_values(values in vec(-1e6f32..1e6, 6)) {
        let data = Array2::from_shape_vec((2, 3), values.iter().map(|&v| v as f64).collect()).unwrap();
        let m = EmbeddingMatrix::new(data, Dtype::F32).unwrap();
        let back = store::decode_emb1(&store::encode_emb1(&m, None).unwrap()).unwrap();
        prop_assert_eq!(back.matrix.dtype(), Dtype::F32);
        prop_assert_eq!(back.matrix.data(), m.data());
    }

    #[test]
    fn every_cut_but_the_trailer_boundary_is_rejected(n in 1usize..5, d in 1usize..5, cut_frac in 0.0f64..1.0) {
        let bytes = store::encode_emb1(&matrix(n, d, 3), None).unwrap();
        let cut = ((bytes.len() as f64) * cut_frac) as usize;
        // dropping the whole trailer leaves a valid id-less file
        let boundary = bytes.len() - 8;
        prop_assert_eq!(store::decode_emb1(&bytes[..cut]).is_ok(), cut == boundary);
    }

    #[test]
    fn subsample_partitions_without_overlap(n in 3usize..40, seed in any::<u64>(), frac in 0.05f64..0.95) {
        let count = ((n as f64 * frac) as usize).clamp(1, n - 1);
        let ds = PairedDataset::with_index_ids(matrix(n, 3, seed), matrix(n, 2, seed ^ 1)).unwrap();
        let (train, held) = store::subsample(&ds, &SplitSpec::count(seed, count)).unwrap();
        prop_assert_eq!(train.len(), count);
        prop_assert_eq!(held.len(), n - count);
        let all: HashSet<&String> = train.ids().iter().chain(held.ids()).collect();
        prop_assert_eq!(all.len(), n);
        let (again, _) = store::subsample(&ds, &SplitSpec::count(seed, count)).unwrap();
        prop_assert_eq!(again.ids(), train.ids());
    }
}

#[test]
fn malformed_files_name_the_problem() {
    let m = matrix(3, 2, 1);
    let good = store::encode_emb1(&m, None).unwrap();

    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(store::decode_emb1(&magic), Err(StoreError::MalformedHeader(_))));

    let mut dtype = good.clone();
    dtype[8] = 7;
    assert!(matches!(store::decode_emb1(&dtype), Err(StoreError::DtypeUnsupported(7))));

    let mut nan = good.clone();
    nan[28..36].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(matches!(
        store::decode_emb1(&nan),
        Err(StoreError::NonFiniteValue { row: 0, col: 0 })
    ));

    let short = &good[..good.len() - 8 - 3];
    assert!(matches!(store::decode_emb1(short), Err(StoreError::TruncatedPayload { .. })));
}

#[test]
fn duplicate_ids_are_rejected() {
    let ids = vec!["a".to_string(), "a".to_string()];
    let err = store::compose_paired(matrix(2, 2, 1), matrix(2, 3, 2), ids).unwrap_err();
    assert!(matches!(err, StoreError::DuplicateId(id) if id == "a"));
}

#[test]
fn mixing_renames_colliding_ids() {
    let base = PairedDataset::with_index_ids(matrix(3, 2, 1), matrix(3, 4, 2)).unwrap();
    let extra = PairedDataset::with_index_ids(matrix(2, 2, 3), matrix(2, 4, 4)).unwrap();
    let mixed = store::mix(&base, &extra).unwrap();
    assert_eq!(mixed.len(), 5);
    let ids: HashSet<&String> = mixed.ids().iter().collect();
    assert_eq!(ids.len(), 5);
    let wrong = PairedDataset::with_index_ids(matrix(2, 3, 3), matrix(2, 4, 4)).unwrap();
    assert!(store::mix(&base, &wrong).is_err());
}

#[test]
fn saved_files_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let m = matrix(4, 3, 9);
    let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
    let path = dir.path().join("x.emb");
    store::save_embeddings(&path, &m, Some(&ids)).unwrap();
    let file = store::load_embedding_file(&path).unwrap();
    assert_eq!(file.matrix, m);
    assert_eq!(file.ids.unwrap(), ids);
    assert!(store::load_embeddings(dir.path().join("missing.emb")).is_err());
}

#[test]
fn child_seeds_do_not_collide() {
    let seeds: HashSet<u64> = (0..10_000).map(|i| child_seed(42, i)).collect();
    assert_eq!(seeds.len(), 10_000);
    assert_ne!(child_seed(1, 0), child_seed(2, 0));
}
