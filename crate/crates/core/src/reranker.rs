//! Second-stage reranking of retrieved excerpts.
//!
//! [`LogisticScorer`] is a small trainable stand-in for a cross-encoder: a
//! logistic model over five pair features, fit with binary cross-entropy.
//! [`RemoteScorer`] forwards pairs to an external scoring service.

use std::collections::HashSet;
use std::path::Path;

use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cfdpr::TextEmbeddings;
use crate::dataset::TripletRecord;
use crate::http::{HttpError, JsonClient, RetryPolicy, Transport};

#[derive(Debug, thiserror::Error)]
pub enum RerankError {
    #[error("empty text in pair")]
    EmptyText,
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("non-finite feature")]
    NonFinite,
    #[error("training data needs both labels")]
    SingleLabel,
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error("scorer returned {got} probabilities for {expected} documents")]
    CountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("scorer checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("missing embedding: {0}")]
    Embedding(String),
}

pub const N_FEATURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairFeatures {
    pub dot: f64,
    pub cosine: f64,
    pub l2_distance: f64,
    pub token_jaccard: f64,
    pub length_ratio: f64,
}

impl PairFeatures {
    pub fn as_array(&self) -> [f64; N_FEATURES] {
        [self.dot, self.cosine, self.l2_distance, self.token_jaccard, self.length_ratio]
    }
}

fn token_set(text: &str) -> HashSet<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn features(
    q_text: &str,
    d_text: &str,
    q_vec: ArrayView1<'_, f64>,
    d_vec: ArrayView1<'_, f64>,
) -> Result<PairFeatures, RerankError> {
    if q_vec.len() != d_vec.len() {
        return Err(RerankError::DimensionMismatch(q_vec.len(), d_vec.len()));
    }
    let (qn, dn) = (q_text.split_whitespace().count(), d_text.split_whitespace().count());
    if qn == 0 || dn == 0 {
        return Err(RerankError::EmptyText);
    }
    let dot = q_vec.dot(&d_vec);
    let norms = q_vec.dot(&q_vec).sqrt() * d_vec.dot(&d_vec).sqrt();
    let cosine = if norms > 0.0 { (dot / norms).clamp(-1.0, 1.0) } else { 0.0 };
    let l2_distance = q_vec.iter().zip(d_vec).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let (qs, ds) = (token_set(q_text), token_set(d_text));
    let token_jaccard = qs.intersection(&ds).count() as f64 / qs.union(&ds).count() as f64;
    let length_ratio = qn.min(dn) as f64 / qn.max(dn) as f64;
    let f = PairFeatures {
        dot,
        cosine,
        l2_distance,
        token_jaccard,
        length_ratio,
    };
    if f.as_array().iter().any(|x| !x.is_finite()) {
        return Err(RerankError::NonFinite);
    }
    Ok(f)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticScorer {
    pub weights: [f64; N_FEATURES],
    pub bias: f64,
}

impl Default for LogisticScorer {
    fn default() -> Self {
        Self {
            weights: [0.0; N_FEATURES],
            bias: 0.0,
        }
    }
}

impl LogisticScorer {
    pub fn logit(&self, f: &PairFeatures) -> f64 {
        self.weights.iter().zip(f.as_array()).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    /// Probability that the pair is a positive.
    pub fn score(&self, f: &PairFeatures) -> f64 {
        sigmoid(self.logit(f))
    }

    pub fn save(&self, path: &Path) -> Result<(), RerankError> {
        let body = serde_json::to_string_pretty(self).expect("scorer serializes");
        std::fs::write(path, body + "\n").map_err(|e| RerankError::Checkpoint {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, RerankError> {
        let err = |reason: String| RerankError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let s: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if s.weights.iter().chain([&s.bias]).any(|x| !x.is_finite()) {
            return Err(err("non-finite parameter".into()));
        }
        Ok(s)
    }
}

/// Binary cross-entropy of one prediction, computed from the logit for
/// numerical stability.
pub fn bce_from_logit(z: f64, y: u8) -> f64 {
    // -[y log s(z) + (1-y) log(1 - s(z))] = softplus(z) - y z
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - f64::from(y) * z
}

pub fn bce_loss(scorer: &LogisticScorer, pairs: &[(PairFeatures, u8)]) -> f64 {
    pairs.iter().map(|(f, y)| bce_from_logit(scorer.logit(f), *y)).sum::<f64>() / pairs.len() as f64
}

/// Gradient of [`bce_loss`] with respect to (weights, bias).
pub fn bce_gradient(scorer: &LogisticScorer, pairs: &[(PairFeatures, u8)]) -> ([f64; N_FEATURES], f64) {
    let mut gw = [0.0; N_FEATURES];
    let mut gb = 0.0;
    for (f, y) in pairs {
        let r = scorer.score(f) - f64::from(*y);
        for (g, x) in gw.iter_mut().zip(f.as_array()) {
            *g += r * x;
        }
        gb += r;
    }
    let n = pairs.len() as f64;
    (gw.map(|g| g / n), gb / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BceConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for BceConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 500,
            seed: 0,
        }
    }
}

/// Full-batch gradient descent on mean BCE.
///
/// Features are standardized internally and the fitted weights mapped back,
/// so the returned scorer applies to raw features. The seed only drives the
/// small random initialization.
pub fn train_bce(pairs: &[(PairFeatures, u8)], cfg: &BceConfig) -> Result<LogisticScorer, RerankError> {
    let labels: HashSet<u8> = pairs.iter().map(|(_, y)| *y).collect();
    if !labels.contains(&0) || !labels.contains(&1) || labels.len() != 2 {
        return Err(RerankError::SingleLabel);
    }
    let n = pairs.len() as f64;
    let mut mean = [0.0; N_FEATURES];
    let mut std = [0.0; N_FEATURES];
    for (f, _) in pairs {
        for (m, x) in mean.iter_mut().zip(f.as_array()) {
            *m += x / n;
        }
    }
    for (f, _) in pairs {
        for ((s, m), x) in std.iter_mut().zip(&mean).zip(f.as_array()) {
            *s += (x - m) * (x - m) / n;
        }
    }
    let std = std.map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
    let scaled: Vec<(PairFeatures, u8)> = pairs
        .iter()
        .map(|(f, y)| {
            let a = f.as_array();
            let z: [f64; N_FEATURES] = std::array::from_fn(|i| (a[i] - mean[i]) / std[i]);
            (
                PairFeatures {
                    dot: z[0],
                    cosine: z[1],
                    l2_distance: z[2],
                    token_jaccard: z[3],
                    length_ratio: z[4],
                },
                *y,
            )
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut s = LogisticScorer {
        weights: std::array::from_fn(|_| rng.random_range(-0.01..0.01)),
        bias: 0.0,
    };
    for epoch in 1..=cfg.epochs {
        let (gw, gb) = bce_gradient(&s, &scaled);
        for (w, g) in s.weights.iter_mut().zip(gw) {
            *w -= cfg.learning_rate * g;
        }
        s.bias -= cfg.learning_rate * gb;
        if s.weights.iter().chain([&s.bias]).any(|x| !x.is_finite()) || !bce_loss(&s, &scaled).is_finite() {
            return Err(RerankError::Diverged(epoch));
        }
    }
    let weights: [f64; N_FEATURES] = std::array::from_fn(|i| s.weights[i] / std[i]);
    let bias = s.bias - (0..N_FEATURES).map(|i| s.weights[i] * mean[i] / std[i]).sum::<f64>();
    Ok(LogisticScorer { weights, bias })
}

/// Training pairs from retriever triplets: (query, positive) is labelled 1,
/// (query, hard negative) 0. Hard negatives equal to the query are skipped.
pub fn training_pairs(triplets: &[TripletRecord], embeddings: &TextEmbeddings) -> Result<Vec<(PairFeatures, u8)>, RerankError> {
    let get = |t: &str| embeddings.get(t).map_err(|e| RerankError::Embedding(e.to_string()));
    let mut out = Vec::new();
    for t in triplets {
        let q = get(&t.query)?;
        out.push((features(&t.query, &t.positive, q, get(&t.positive)?)?, 1));
        for n in t.hard_negatives.iter().filter(|n| **n != t.query) {
            out.push((features(&t.query, n, q, get(n)?)?, 0));
        }
    }
    Ok(out)
}

/// A candidate passed to a scorer.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub text: &'a str,
    pub vector: ArrayView1<'a, f64>,
}

pub trait PairScorer: Send + Sync {
    /// Positive-class probability for each document, in input order.
    fn probabilities(&self, query: Candidate<'_>, docs: &[Candidate<'_>]) -> Result<Vec<f64>, RerankError>;
}

impl PairScorer for LogisticScorer {
    fn probabilities(&self, query: Candidate<'_>, docs: &[Candidate<'_>]) -> Result<Vec<f64>, RerankError> {
        docs.iter()
            .map(|d| Ok(self.score(&features(query.text, d.text, query.vector, d.vector)?)))
            .collect()
    }
}

/// Client for `POST {"query": s, "docs": [...]} -> {"probs": [...]}`.
pub struct RemoteScorer {
    client: JsonClient,
}

impl RemoteScorer {
    pub fn new(endpoint: impl Into<String>, transport: Box<dyn Transport>, retry: RetryPolicy, auth_env_var: Option<String>) -> Self {
        Self {
            client: JsonClient::new(transport, endpoint.into(), retry, auth_env_var),
        }
    }
}

impl PairScorer for RemoteScorer {
    fn probabilities(&self, query: Candidate<'_>, docs: &[Candidate<'_>]) -> Result<Vec<f64>, RerankError> {
        let texts: Vec<&str> = docs.iter().map(|d| d.text).collect();
        let out = self.client.call(&json!({ "query": query.text, "docs": texts }), &[])?;
        let probs = out
            .body
            .get("probs")
            .and_then(Value::as_array)
            .ok_or_else(|| HttpError::Malformed("missing `probs` array".into()))?;
        if probs.len() != docs.len() {
            return Err(RerankError::CountMismatch {
                expected: docs.len(),
                got: probs.len(),
            });
        }
        probs
            .iter()
            .map(|p| p.as_f64().filter(|x| x.is_finite()).ok_or(RerankError::NonFinite))
            .collect()
    }
}

/// Stable sort by descending probability; exact ties keep input order.
pub fn rerank<T>(items: Vec<T>, probs: &[f64]) -> Vec<(T, f64)> {
    assert_eq!(items.len(), probs.len(), "one probability per item");
    let mut paired: Vec<(T, f64)> = items.into_iter().zip(probs.iter().copied()).collect();
    paired.sort_by(|a, b| b.1.total_cmp(&a.1));
    paired
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn feats(v: [f64; 5]) -> PairFeatures {
        PairFeatures {
            dot: v[0],
            cosine: v[1],
            l2_distance: v[2],
            token_jaccard: v[3],
            length_ratio: v[4],
        }
    }

    #[test]
    fn feature_examples() {
        let v = array![0.6, 0.8];
        let f = features("Same text", "same TEXT", v.view(), v.view()).unwrap();
        assert_eq!((f.token_jaccard, f.length_ratio, f.l2_distance), (1.0, 1.0, 0.0));
        assert!((f.cosine - 1.0).abs() < 1e-12);
        let f = features("a b", "c d", v.view(), v.view()).unwrap();
        assert_eq!(f.token_jaccard, 0.0);
        let f = features("a b", "a b c d", v.view(), v.view()).unwrap();
        assert_eq!((f.length_ratio, f.token_jaccard), (0.5, 0.5));
        assert!(matches!(features(" ", "a", v.view(), v.view()), Err(RerankError::EmptyText)));
        assert!(features("a", "b", v.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        let s = LogisticScorer::default();
        assert_eq!(s.score(&feats([1.0, 2.0, 3.0, 0.5, 0.5])), 0.5);
        let s = LogisticScorer {
            weights: [0.0; 5],
            bias: 3f64.ln(),
        };
        assert!((s.score(&feats([0.0; 5])) - 0.75).abs() < 1e-15);
        let s = LogisticScorer {
            weights: [0.0; 5],
            bias: -(3f64.ln()),
        };
        assert!((s.score(&feats([0.0; 5])) - 0.25).abs() < 1e-15);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn bce_values() {
        assert!((bce_from_logit(0.0, 1) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_from_logit(0.0, 0) - 2f64.ln()).abs() < 1e-15);
        let p = sigmoid(1.3);
        assert!((bce_from_logit(1.3, 1) + p.ln()).abs() < 1e-12);
        assert!((bce_from_logit(1.3, 0) + (1.0 - p).ln()).abs() < 1e-12);
        assert!(bce_from_logit(-1000.0, 1).is_finite());
    }

    #[test]
    fn single_label_rejected() {
        let pairs = vec![(feats([1.0; 5]), 1), (feats([0.0; 5]), 1)];
        assert!(matches!(train_bce(&pairs, &BceConfig::default()), Err(RerankError::SingleLabel)));
    }

    #[test]
    fn rerank_orders_and_is_stable() {
        let out = rerank(vec!["d1", "d2", "d3"], &[0.9, 0.2, 0.6]);
        assert_eq!(out.iter().map(|x| x.0).collect::<Vec<_>>(), ["d1", "d3", "d2"]);
        let out = rerank(vec!["a", "b", "c"], &[0.5; 3]);
        assert_eq!(out.iter().map(|x| x.0).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(rerank(vec!["x"], &[0.1])[0].0, "x");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scorer.json");
        let s = LogisticScorer {
            weights: [0.1, -2.0, 3.5, 1e-9, 7.0],
            bias: -0.25,
        };
        s.save(&p).unwrap();
        assert_eq!(LogisticScorer::load(&p).unwrap(), s);
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert!(v.get("weights").is_some() && v.get("bias").is_some());
    }

    #[test]
    fn remote_scorer_protocol() {
        use crate::http::testing::*;
        let t = ScriptedTransport::with_responses(vec![status(503), ok(r#"{"probs": [0.2, 0.9]}"#)]);
        let s = RemoteScorer::new("http://score.test", Box::new(t.clone()), fast_retry(), None);
        let v = array![1.0, 0.0];
        let c = |text| Candidate { text, vector: v.view() };
        let probs = s.probabilities(c("q"), &[c("a"), c("b")]).unwrap();
        assert_eq!(probs, vec![0.2, 0.9]);
        let req = &t.requests.lock().unwrap()[1].0;
        assert_eq!(req, &json!({"query": "q", "docs": ["a", "b"]}));
    }
}
