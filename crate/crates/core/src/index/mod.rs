//! Maximum inner-product search over corpus embeddings.
//!
//! Two index kinds share one type: an exact index scans every vector, an
//! IVF-Flat index clusters the vectors with k-means (Euclidean) and at query
//! time scans only the `n_probe` lists whose centroids have the largest dot
//! product with the query. Results are ordered by descending score, ties by
//! ascending doc id.

mod io;
mod kmeans;

pub use io::{load_index, save_index};
pub use kmeans::{kmeans, KMeansResult};

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::CorpusDocument;
use crate::embedder::EmbeddingMatrix;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("cannot index an empty corpus")]
    Empty,
    #[error("duplicate doc_id `{0}`")]
    DuplicateId(String),
    #[error("{docs} documents but {rows} embedding rows")]
    CountMismatch { docs: usize, rows: usize },
    #[error("query has dimension {got}, index has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid IVF parameters: {0}")]
    Params(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("index file {path}: {reason}")]
    Format { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Exact,
    Ivf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IvfParams {
    pub k_centroids: usize,
    pub n_probe: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_seed: u64,
}

impl Default for IvfParams {
    fn default() -> Self {
        Self {
            k_centroids: 300,
            n_probe: 30,
            kmeans_max_iters: 25,
            kmeans_seed: 0,
        }
    }
}

impl IvfParams {
    pub fn validate(&self, corpus_size: usize) -> Result<(), IndexError> {
        if self.k_centroids == 0 || self.k_centroids > corpus_size {
            return Err(IndexError::Params(format!(
                "k_centroids = {} must be in 1..={corpus_size}",
                self.k_centroids
            )));
        }
        if self.n_probe == 0 || self.n_probe > self.k_centroids {
            return Err(IndexError::Params(format!(
                "n_probe = {} must be in 1..={}",
                self.n_probe, self.k_centroids
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfData {
    pub params: IvfParams,
    pub centroids: Array2<f64>,
    /// Centroid of each document.
    pub assignments: Vec<u32>,
    /// k-means objective after each Lloyd iteration.
    pub objective_history: Vec<f64>,
    lists: Vec<Vec<usize>>,
}

impl IvfData {
    fn new(params: IvfParams, centroids: Array2<f64>, assignments: Vec<u32>, objective_history: Vec<f64>) -> Self {
        let mut lists = vec![Vec::new(); centroids.nrows()];
        for (doc, &c) in assignments.iter().enumerate() {
            lists[c as usize].push(doc);
        }
        Self {
            params,
            centroids,
            assignments,
            objective_history,
            lists,
        }
    }

    /// Document rows in centroid `c`'s list.
    pub fn list(&self, c: usize) -> &[usize] {
        &self.lists[c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    pub kind: IndexKind,
    pub doc_ids: Vec<String>,
    pub vectors: Array2<f64>,
    pub ivf: Option<IvfData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
}

fn check_ids(doc_ids: &[String]) -> Result<(), IndexError> {
    if doc_ids.is_empty() {
        return Err(IndexError::Empty);
    }
    let mut seen = HashSet::with_capacity(doc_ids.len());
    for id in doc_ids {
        if !seen.insert(id.as_str()) {
            return Err(IndexError::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

impl VectorIndex {
    pub fn exact(doc_ids: Vec<String>, vectors: Array2<f64>) -> Result<Self, IndexError> {
        check_ids(&doc_ids)?;
        if doc_ids.len() != vectors.nrows() {
            return Err(IndexError::CountMismatch {
                docs: doc_ids.len(),
                rows: vectors.nrows(),
            });
        }
        Ok(Self {
            kind: IndexKind::Exact,
            doc_ids,
            vectors,
            ivf: None,
        })
    }

    pub fn ivf(doc_ids: Vec<String>, vectors: Array2<f64>, params: IvfParams) -> Result<Self, IndexError> {
        let mut index = Self::exact(doc_ids, vectors)?;
        params.validate(index.len())?;
        let km = kmeans(index.vectors.view(), params.k_centroids, params.kmeans_max_iters, params.kmeans_seed);
        log::info!(
            "k-means: {} centroids, {} iterations, objective {:.4}",
            params.k_centroids,
            km.objective_history.len(),
            km.objective_history.last().copied().unwrap_or(0.0)
        );
        index.kind = IndexKind::Ivf;
        index.ivf = Some(IvfData::new(params, km.centroids, km.assignments, km.objective_history));
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.vectors.ncols()
    }

    /// Top `k` hits. IVF indexes probe their configured `n_probe` lists.
    pub fn search(&self, query: ArrayView1<'_, f64>, k: usize) -> Result<Vec<SearchHit>, IndexError> {
        let n_probe = self.ivf.as_ref().map(|i| i.params.n_probe);
        self.search_with(query, k, n_probe)
    }

    /// Like [`search`](Self::search) with an explicit probe count for IVF
    /// indexes (clamped to the number of centroids); ignored for exact ones.
    pub fn search_with(&self, query: ArrayView1<'_, f64>, k: usize, n_probe: Option<usize>) -> Result<Vec<SearchHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.len() != self.dimension() {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension(),
                got: query.len(),
            });
        }
        let candidates: Vec<usize> = match (&self.ivf, n_probe) {
            (Some(ivf), Some(p)) => {
                let c_scores = ivf.centroids.dot(&query);
                let mut order: Vec<usize> = (0..c_scores.len()).collect();
                order.sort_by(|&a, &b| c_scores[b].total_cmp(&c_scores[a]).then(a.cmp(&b)));
                let mut rows: Vec<usize> = order
                    .into_iter()
                    .take(p.clamp(1, ivf.centroids.nrows()))
                    .flat_map(|c| ivf.list(c).iter().copied())
                    .collect();
                rows.sort_unstable();
                rows
            }
            _ => (0..self.len()).collect(),
        };
        let mut scored: Vec<(f64, usize)> = candidates
            .into_iter()
            .map(|r| (self.vectors.row(r).dot(&query), r))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then_with(|| self.doc_ids[a.1].cmp(&self.doc_ids[b.1]));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(score, r)| SearchHit {
                doc_id: self.doc_ids[r].clone(),
                score,
            })
            .collect())
    }
}

pub fn build_exact(docs: &[CorpusDocument], embeddings: &EmbeddingMatrix) -> Result<VectorIndex, IndexError> {
    VectorIndex::exact(docs.iter().map(|d| d.doc_id.clone()).collect(), embeddings.values().clone())
}

pub fn build_ivf(docs: &[CorpusDocument], embeddings: &EmbeddingMatrix, params: IvfParams) -> Result<VectorIndex, IndexError> {
    VectorIndex::ivf(docs.iter().map(|d| d.doc_id.clone()).collect(), embeddings.values().clone(), params)
}

/// Fraction of the `exact` hits that also appear in `approx`.
pub fn recall_at_k(approx: &[SearchHit], exact: &[SearchHit]) -> f64 {
    if exact.is_empty() {
        return 1.0;
    }
    let truth: HashSet<&str> = exact.iter().map(|h| h.doc_id.as_str()).collect();
    approx.iter().filter(|h| truth.contains(h.doc_id.as_str())).count() as f64 / exact.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i:05}")).collect()
    }

    pub(crate) fn random_unit(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
        for mut row in m.rows_mut() {
            let norm = row.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
            row /= norm;
        }
        m
    }

    #[test]
    fn hand_example() {
        let idx = VectorIndex::exact(vec!["x".into(), "y".into()], array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let hits = idx.search(array![0.9, 0.1].view(), 1).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].doc_id, "x");
        assert!((hits[0].score - 0.9).abs() < 1e-15);
    }

    #[test]
    fn single_document_always_returned() {
        let idx = VectorIndex::exact(vec!["only".into()], array![[0.3, -0.2]]).unwrap();
        for q in [array![1.0, 0.0], array![-5.0, 2.0]] {
            assert_eq!(idx.search(q.view(), 3).unwrap()[0].doc_id, "only");
        }
    }

    #[test]
    fn build_errors() {
        assert!(matches!(VectorIndex::exact(vec![], Array2::zeros((0, 2))), Err(IndexError::Empty)));
        assert!(matches!(
            VectorIndex::exact(vec!["a".into(), "a".into()], Array2::zeros((2, 2))),
            Err(IndexError::DuplicateId(_))
        ));
        let p = IvfParams {
            k_centroids: 5,
            n_probe: 1,
            ..IvfParams::default()
        };
        assert!(matches!(VectorIndex::ivf(ids(3), Array2::zeros((3, 2)), p), Err(IndexError::Params(_))));
        let idx = VectorIndex::exact(ids(2), Array2::zeros((2, 2))).unwrap();
        assert!(matches!(idx.search(array![1.0].view(), 1), Err(IndexError::DimensionMismatch { .. })));
        assert!(matches!(idx.search(array![1.0, 0.0].view(), 0), Err(IndexError::ZeroK)));
    }

    #[test]
    fn ties_break_by_doc_id_and_k_exceeding_corpus_returns_all() {
        let idx = VectorIndex::exact(vec!["c".into(), "a".into(), "b".into()], Array2::from_elem((3, 2), 0.5)).unwrap();
        let hits = idx.search(array![1.0, 1.0].view(), 10).unwrap();
        let order: Vec<&str> = hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(order, ["a", "b", "c"]);
    }

    #[test]
    fn exact_matches_brute_force() {
        let v = random_unit(100, 8, 1);
        let idx = VectorIndex::exact(ids(100), v.clone()).unwrap();
        let qs = random_unit(20, 8, 2);
        for q in qs.rows() {
            let mut brute: Vec<(f64, usize)> = (0..100).map(|i| (v.row(i).dot(&q), i)).collect();
            brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let got: Vec<String> = idx.search(q, 7).unwrap().into_iter().map(|h| h.doc_id).collect();
            let want: Vec<String> = brute[..7].iter().map(|(_, i)| format!("d{i:05}")).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn full_probe_equals_exact() {
        let v = random_unit(300, 16, 3);
        let p = IvfParams {
            k_centroids: 12,
            n_probe: 12,
            kmeans_max_iters: 10,
            kmeans_seed: 4,
        };
        let ivf = VectorIndex::ivf(ids(300), v.clone(), p).unwrap();
        let exact = VectorIndex::exact(ids(300), v).unwrap();
        for q in random_unit(25, 16, 5).rows() {
            assert_eq!(ivf.search(q, 10).unwrap(), exact.search(q, 10).unwrap());
        }
    }

    #[test]
    fn one_centroid_per_point_matches_exact() {
        let v = random_unit(40, 4, 6);
        let p = IvfParams {
            k_centroids: 40,
            n_probe: 3,
            kmeans_max_iters: 25,
            kmeans_seed: 0,
        };
        let ivf = VectorIndex::ivf(ids(40), v.clone(), p).unwrap();
        let data = ivf.ivf.as_ref().unwrap();
        for c in 0..40 {
            assert_eq!(data.list(c).len(), 1);
        }
        let exact = VectorIndex::exact(ids(40), v).unwrap();
        // With one point per list, probing p lists returns exactly p candidates
        // and, at p = K, the exact result.
        for q in random_unit(10, 4, 7).rows() {
            assert_eq!(ivf.search_with(q, 40, Some(40)).unwrap(), exact.search(q, 40).unwrap());
        }
    }

    #[test]
    fn recall_is_monotone_in_probes() {
        let v = random_unit(2000, 16, 8);
        let p = IvfParams {
            k_centroids: 40,
            n_probe: 1,
            kmeans_max_iters: 15,
            kmeans_seed: 9,
        };
        let ivf = VectorIndex::ivf(ids(2000), v.clone(), p).unwrap();
        let exact = VectorIndex::exact(ids(2000), v).unwrap();
        let qs = random_unit(50, 16, 10);
        let mut last = 0.0;
        for probes in [1, 5, 10, 40] {
            let r: f64 = qs
                .rows()
                .into_iter()
                .map(|q| recall_at_k(&ivf.search_with(q, 10, Some(probes)).unwrap(), &exact.search(q, 10).unwrap()))
                .sum::<f64>()
                / 50.0;
            assert!(r >= last, "recall fell from {last} to {r} at n_probe={probes}");
            last = r;
        }
        assert_eq!(last, 1.0);
    }
}
