//! Counterfactual dense retriever.
//!
//! Two linear projection heads (query and document) sit on top of frozen base
//! embeddings. They are trained with the softmax contrastive loss
//!
//! ```text
//! L = -log( exp(sim(q, p+)) / (exp(sim(q, p+)) + sum_j exp(sim(q, p-_j))) )
//! ```
//!
//! where `sim` is the dot product of the projected vectors, the positive is a
//! human-authored counterfactual and the hard negatives are paraphrases of the
//! query (plus the query itself).

mod checkpoint;
mod grad;
mod train;

pub use checkpoint::{load_encoder, save_encoder};
pub use grad::{loss_gradients, BatchGradients, EmbeddedTriplet};
pub use train::{evaluate_top1, initial_encoders, sample_eval_pools, train, EpochLog, EvalPool, TrainConfig, TrainedRetriever};

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::EmbeddingMatrix;

/// Number of random and of hard negatives in an evaluation pool.
pub const EVAL_NEGATIVES: usize = 30;

#[derive(Debug, thiserror::Error)]
pub enum RetrieverError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("non-finite input to the contrastive loss")]
    NonFinite,
    #[error("non-finite gradient for batch item {item}")]
    NonFiniteGradient { item: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("no base embedding for text `{0}`")]
    MissingEmbedding(String),
    #[error("invalid eval pool for query `{query}`: {reason}")]
    InvalidPool { query: String, reason: String },
    #[error("encoder checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderRole {
    Query,
    Document,
}

/// A linear projection `x -> x W` with `W` of shape `d_in x d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionEncoder {
    pub role: EncoderRole,
    pub weights: Array2<f64>,
}

impl ProjectionEncoder {
    pub fn new(role: EncoderRole, weights: Array2<f64>) -> Result<Self, RetrieverError> {
        if weights.ncols() < 2 {
            return Err(RetrieverError::Config("d_out must be at least 2".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(RetrieverError::NonFinite);
        }
        Ok(Self { role, weights })
    }

    /// Uniform initialization in `[-1/sqrt(d_in), 1/sqrt(d_in)]`.
    pub fn init_uniform(role: EncoderRole, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((d_in, d_out), || rng.random_range(-bound..=bound));
        Self { role, weights }
    }

    pub fn zeros(role: EncoderRole, d_in: usize, d_out: usize) -> Self {
        Self {
            role,
            weights: Array2::zeros((d_in, d_out)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn project(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>, RetrieverError> {
        if x.len() != self.input_dim() {
            return Err(RetrieverError::DimensionMismatch(x.len(), self.input_dim()));
        }
        Ok(x.dot(&self.weights))
    }

    /// Projects every row of `xs`.
    pub fn project_rows(&self, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>, RetrieverError> {
        if xs.ncols() != self.input_dim() {
            return Err(RetrieverError::DimensionMismatch(xs.ncols(), self.input_dim()));
        }
        Ok(xs.dot(&self.weights))
    }
}

/// The query/document encoder pair of a bi-encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub query: ProjectionEncoder,
    pub document: ProjectionEncoder,
}

impl EncoderPair {
    pub fn score(&self, query: ArrayView1<'_, f64>, doc: ArrayView1<'_, f64>) -> Result<f64, RetrieverError> {
        let q = self.query.project(query)?;
        let d = self.document.project(doc)?;
        Ok(q.dot(&d))
    }
}

/// Dot product of two projected vectors.
pub fn similarity(q: &[f64], p: &[f64]) -> Result<f64, RetrieverError> {
    if q.len() != p.len() {
        return Err(RetrieverError::DimensionMismatch(q.len(), p.len()));
    }
    Ok(q.iter().zip(p).map(|(a, b)| a * b).sum())
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Contrastive loss given the positive's similarity and the negatives'.
pub fn loss_from_similarities(positive: f64, negatives: &[f64]) -> Result<f64, RetrieverError> {
    if negatives.is_empty() {
        return Err(RetrieverError::Config("at least one negative required".into()));
    }
    if !positive.is_finite() || negatives.iter().any(|s| !s.is_finite()) {
        return Err(RetrieverError::NonFinite);
    }
    let lse = log_sum_exp(std::iter::once(positive).chain(negatives.iter().copied()));
    Ok(lse - positive)
}

/// Contrastive loss of a projected query against its positive and negatives.
pub fn contrastive_loss(q: &[f64], p_plus: &[f64], p_negs: &[&[f64]]) -> Result<f64, RetrieverError> {
    if p_negs.is_empty() {
        return Err(RetrieverError::Config("at least one negative required".into()));
    }
    let pos = similarity(q, p_plus)?;
    let negs = p_negs.iter().map(|n| similarity(q, n)).collect::<Result<Vec<_>, _>>()?;
    loss_from_similarities(pos, &negs)
}

/// Base embeddings addressable by text.
#[derive(Debug, Clone)]
pub struct TextEmbeddings {
    index: HashMap<String, usize>,
    matrix: Array2<f64>,
}

impl TextEmbeddings {
    /// Pairs `texts[i]` with row `i`; later duplicates keep the first row.
    pub fn new(texts: &[String], matrix: EmbeddingMatrix) -> Result<Self, RetrieverError> {
        if texts.len() != matrix.rows() {
            return Err(RetrieverError::DimensionMismatch(texts.len(), matrix.rows()));
        }
        let mut index = HashMap::with_capacity(texts.len());
        for (i, t) in texts.iter().enumerate() {
            index.entry(t.clone()).or_insert(i);
        }
        Ok(Self {
            index,
            matrix: matrix.into_values(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn get(&self, text: &str) -> Result<ArrayView1<'_, f64>, RetrieverError> {
        self.index
            .get(text)
            .map(|&i| self.matrix.row(i))
            .ok_or_else(|| RetrieverError::MissingEmbedding(text.chars().take(60).collect()))
    }

    pub fn contains(&self, text: &str) -> bool {
        self.index.contains_key(text)
    }
}
