//! Text embedding backends. Downstream vector math only sees an
//! [`EmbeddingMatrix`], so the deterministic hashed backend and the remote
//! service are interchangeable.

mod cache;
mod hashed;
mod remote;

pub use cache::EmbeddingCache;
pub use hashed::{fnv1a64, hashed_test_embed};
pub use remote::RemoteEmbedder;

use std::time::Duration;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::http::{HttpError, ReqwestTransport, RetryPolicy};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("invalid embedding config: {0}")]
    Config(String),
    #[error("text {index} is empty")]
    EmptyText { index: usize },
    #[error("no texts to embed")]
    NoTexts,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("remote returned {got} embeddings for {expected} texts")]
    RowMismatch { expected: usize, got: usize },
    #[error("non-finite value in embedding row {row}")]
    NonFinite { row: usize },
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("embedding cache {path}: {reason}")]
    Cache { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    HashedTest,
}

fn default_true() -> bool {
    true
}
fn default_in_flight() -> usize {
    4
}
fn default_attempts() -> u32 {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingBackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub dimension: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Hash seed for the hashed backend.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
}

impl EmbeddingBackendConfig {
    pub fn hashed(dimension: usize) -> Self {
        Self {
            kind: BackendKind::HashedTest,
            endpoint: None,
            dimension,
            batch_size: 64,
            auth_env_var: None,
            normalize: true,
            seed: 0,
            max_in_flight: default_in_flight(),
            max_attempts: default_attempts(),
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dimension < 2 {
            return Err(EmbedError::Config("dimension must be at least 2".into()));
        }
        if self.batch_size == 0 {
            return Err(EmbedError::Config("batch_size must be positive".into()));
        }
        if self.kind == BackendKind::Remote && self.endpoint.is_none() {
            return Err(EmbedError::Config("remote backend requires an endpoint".into()));
        }
        Ok(())
    }

    /// Stable identifier used to key cached vectors.
    pub fn backend_id(&self) -> String {
        match self.kind {
            BackendKind::HashedTest => format!("hashed_test:d{}:s{}:n{}", self.dimension, self.seed, self.normalize),
            BackendKind::Remote => format!(
                "remote:{}:d{}:n{}",
                self.endpoint.as_deref().unwrap_or(""),
                self.dimension,
                self.normalize
            ),
        }
    }
}

/// Dense row-major embeddings, one row per input text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self, EmbedError> {
        if let Some(row) = values.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(EmbedError::NonFinite { row });
        }
        Ok(Self { values })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dimension(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// Something that turns texts into fixed-width vectors.
pub trait Embedder: Send + Sync {
    fn backend_id(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError>;
}

pub fn l2_normalize(row: &mut [f64]) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        row.iter_mut().for_each(|v| *v /= norm);
    }
}

fn check_texts(texts: &[String]) -> Result<(), EmbedError> {
    if texts.is_empty() {
        return Err(EmbedError::NoTexts);
    }
    if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(EmbedError::EmptyText { index });
    }
    Ok(())
}

/// Deterministic character 3-gram hashing backend.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    cfg: EmbeddingBackendConfig,
}

impl HashedEmbedder {
    pub fn new(cfg: EmbeddingBackendConfig) -> Result<Self, EmbedError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }
}

impl Embedder for HashedEmbedder {
    fn backend_id(&self) -> String {
        self.cfg.backend_id()
    }

    fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError> {
        check_texts(texts)?;
        let d = self.cfg.dimension;
        let mut values = Array2::zeros((texts.len(), d));
        for (i, t) in texts.iter().enumerate() {
            let mut row = if self.cfg.normalize {
                hashed_test_embed(t, d, self.cfg.seed)
            } else {
                hashed::signed_counts(t, d, self.cfg.seed)
            };
            if row.len() != d {
                row.resize(d, 0.0);
            }
            values.row_mut(i).assign(&ArrayView1::from(&row));
        }
        EmbeddingMatrix::new(values)
    }
}

/// Builds the backend described by `cfg`.
pub fn build_embedder(cfg: &EmbeddingBackendConfig) -> Result<Box<dyn Embedder>, EmbedError> {
    cfg.validate()?;
    match cfg.kind {
        BackendKind::HashedTest => Ok(Box::new(HashedEmbedder::new(cfg.clone())?)),
        BackendKind::Remote => {
            let transport = ReqwestTransport::new(Duration::from_secs(60))?;
            let retry = RetryPolicy {
                max_attempts: cfg.max_attempts,
                ..RetryPolicy::default()
            };
            Ok(Box::new(RemoteEmbedder::new(cfg.clone(), Box::new(transport), retry)?))
        }
    }
}

/// Embeds `texts` with the backend described by `cfg`.
pub fn embed_batch(texts: &[String], cfg: &EmbeddingBackendConfig) -> Result<EmbeddingMatrix, EmbedError> {
    build_embedder(cfg)?.embed(texts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn same_text_gives_identical_rows() {
        let m = embed_batch(&texts(&["hello world", "hello world"]), &EmbeddingBackendConfig::hashed(64)).unwrap();
        assert_eq!(m.row(0), m.row(1));
    }

    #[test]
    fn rows_are_unit_norm() {
        let m = embed_batch(&texts(&["a quick fox", "lazy dog", "zzz"]), &EmbeddingBackendConfig::hashed(64)).unwrap();
        assert_eq!((m.rows(), m.dimension()), (3, 64));
        for r in m.values().rows() {
            let n = r.dot(&r).sqrt();
            assert!((n - 1.0).abs() < 1e-9, "{n}");
        }
    }

    #[test]
    fn batching_is_invariant() {
        let cfg = EmbeddingBackendConfig::hashed(32);
        let t = texts(&["one", "two two"]);
        let u = texts(&["three", "four four four"]);
        let joined: Vec<String> = t.iter().chain(&u).cloned().collect();
        let all = embed_batch(&joined, &cfg).unwrap();
        let a = embed_batch(&t, &cfg).unwrap();
        let b = embed_batch(&u, &cfg).unwrap();
        let stacked = ndarray::concatenate(ndarray::Axis(0), &[a.values().view(), b.values().view()]).unwrap();
        assert_eq!(all.values(), &stacked);
    }

    #[test]
    fn rejects_empty_texts() {
        let cfg = EmbeddingBackendConfig::hashed(8);
        assert!(matches!(embed_batch(&[], &cfg), Err(EmbedError::NoTexts)));
        assert!(matches!(
            embed_batch(&texts(&["ok", "  "]), &cfg),
            Err(EmbedError::EmptyText { index: 1 })
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EmbeddingBackendConfig::hashed(1);
        assert!(cfg.validate().is_err());
        cfg.dimension = 8;
        cfg.kind = BackendKind::Remote;
        assert!(cfg.validate().is_err());
        cfg.endpoint = Some("http://localhost:1".into());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn non_finite_matrix_rejected() {
        let mut v = Array2::zeros((2, 2));
        v[[1, 0]] = f64::NAN;
        assert!(matches!(EmbeddingMatrix::new(v), Err(EmbedError::NonFinite { row: 1 })));
    }
}
