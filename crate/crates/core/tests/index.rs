use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recast::index::{load_index, recall_at_k, save_index, IvfParams, VectorIndex};

fn random_vectors(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("doc{i:05}")).collect()
}

/// Full sort by score desc then id asc.
fn brute_force(vectors: &Array2<f64>, ids: &[String], q: &[f64], k: usize) -> Vec<String> {
    let mut scored: Vec<(f64, &String)> = vectors
        .rows()
        .into_iter()
        .zip(ids)
        .map(|(row, id)| (row.iter().zip(q).map(|(a, b)| a * b).sum(), id))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().take(k).map(|(_, id)| id.clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exact_search_equals_brute_force(seed in any::<u64>(), n in 1usize..300, d in 2usize..16, k in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = random_vectors(&mut rng, n, d);
        let index = VectorIndex::exact(ids(n), vectors.clone()).unwrap();
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got: Vec<String> = index.search(ndarray::ArrayView1::from(&q), k).unwrap().into_iter().map(|h| h.doc_id).collect();
        prop_assert_eq!(got, brute_force(&vectors, &ids(n), &q, k));
    }

    #[test]
    fn probing_every_list_is_exact(seed in any::<u64>(), n in 20usize..200, clusters in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = random_vectors(&mut rng, n, 6);
        let params = IvfParams { k_centroids: clusters, n_probe: 1, kmeans_max_iters: 10, kmeans_seed: seed };
        let ivf = VectorIndex::ivf(ids(n), vectors.clone(), params).unwrap();
        let exact = VectorIndex::exact(ids(n), vectors).unwrap();
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let qv = ndarray::ArrayView1::from(&q);
        let all = ivf.search_with(qv, 10, Some(clusters)).unwrap();
        let truth = exact.search(qv, 10).unwrap();
        prop_assert_eq!(recall_at_k(&all, &truth), 1.0);
        // each posting list entry appears exactly once
        let data = ivf.ivf.as_ref().unwrap();
        let mut rows: Vec<usize> = (0..clusters).flat_map(|c| data.list(c).to_vec()).collect();
        rows.sort_unstable();
        prop_assert_eq!(rows, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn saved_index_searches_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vectors = random_vectors(&mut rng, 500, 8);
    let params = IvfParams {
        k_centroids: 10,
        n_probe: 3,
        kmeans_max_iters: 15,
        kmeans_seed: 1,
    };
    let index = VectorIndex::ivf(ids(500), vectors, params).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.cfix");
    save_index(&index, &path).unwrap();
    let back = load_index(&path).unwrap();
    for _ in 0..20 {
        let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let qv = ndarray::ArrayView1::from(&q);
        assert_eq!(index.search(qv, 7).unwrap(), back.search(qv, 7).unwrap());
    }
    // identical bytes on re-save
    let again = dir.path().join("again.cfix");
    save_index(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}
