use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grad::{loss_gradients, EmbeddedTriplet};
use super::{EncoderPair, EncoderRole, ProjectionEncoder, RetrieverError, TextEmbeddings, EVAL_NEGATIVES};
use crate::dataset::TripletRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub in_batch_negatives: bool,
    pub grad_clip: f64,
    /// Evaluate every this many epochs; 0 disables evaluation.
    pub eval_every: usize,
    pub output_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 40,
            batch_size: 32,
            seed: 0,
            in_batch_negatives: true,
            grad_clip: 2.0,
            eval_every: 0,
            output_dim: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RetrieverError> {
        let bad = |m: &str| Err(RetrieverError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.in_batch_negatives && self.batch_size < 2 {
            return bad("batch_size must be at least 2 with in-batch negatives");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.output_dim < 2 {
            return bad("output_dim must be at least 2");
        }
        Ok(())
    }
}

/// A top-1 evaluation pool: the positive competes with 30 random and 30 hard
/// negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPool {
    pub query: String,
    pub positive: String,
    pub random_negatives: Vec<String>,
    pub hard_negatives: Vec<String>,
}

impl EvalPool {
    pub fn validate(&self) -> Result<(), RetrieverError> {
        let fail = |reason: String| {
            Err(RetrieverError::InvalidPool {
                query: self.query.clone(),
                reason,
            })
        };
        if self.random_negatives.len() != EVAL_NEGATIVES || self.hard_negatives.len() != EVAL_NEGATIVES {
            return fail(format!(
                "expected {EVAL_NEGATIVES}+{EVAL_NEGATIVES} negatives, got {}+{}",
                self.random_negatives.len(),
                self.hard_negatives.len()
            ));
        }
        if self.random_negatives.iter().chain(&self.hard_negatives).any(|n| *n == self.positive) {
            return fail("positive appears among the negatives".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub eval_top1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedRetriever {
    pub encoders: EncoderPair,
    pub log: Vec<EpochLog>,
}

fn embed_triplets(triplets: &[TripletRecord], emb: &TextEmbeddings) -> Result<Vec<EmbeddedTriplet>, RetrieverError> {
    triplets
        .iter()
        .map(|t| {
            Ok(EmbeddedTriplet {
                query: emb.get(&t.query)?.to_owned(),
                positive: emb.get(&t.positive)?.to_owned(),
                hard_negatives: t
                    .hard_negatives
                    .iter()
                    .map(|n| emb.get(n).map(|v| v.to_owned()))
                    .collect::<Result<_, _>>()?,
            })
        })
        .collect()
}

/// Initial encoders for `cfg`: both heads drawn from one seeded stream.
pub fn initial_encoders(d_in: usize, cfg: &TrainConfig) -> EncoderPair {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let query = ProjectionEncoder::init_uniform(EncoderRole::Query, d_in, cfg.output_dim, &mut rng);
    let document = ProjectionEncoder::init_uniform(EncoderRole::Document, d_in, cfg.output_dim, &mut rng);
    EncoderPair { query, document }
}

/// Trains the projection heads with clipped mini-batch gradient descent.
///
/// Deterministic for fixed inputs: initialization and per-epoch shuffles come
/// from a ChaCha stream seeded with `cfg.seed`.
pub fn train(
    triplets: &[TripletRecord],
    embeddings: &TextEmbeddings,
    cfg: &TrainConfig,
    eval_pools: Option<&[EvalPool]>,
) -> Result<TrainedRetriever, RetrieverError> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(RetrieverError::Config("no training triplets".into()));
    }
    let data = embed_triplets(triplets, embeddings)?;
    let d_in = embeddings.dimension();
    let mut enc = initial_encoders(d_in, cfg);
    // shuffles use a stream separate from initialization
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<EmbeddedTriplet> = chunk.iter().map(|&i| data[i].clone()).collect();
            let g = loss_gradients(&batch, &enc, cfg.in_batch_negatives).map_err(|e| match e {
                RetrieverError::NonFiniteGradient { .. } | RetrieverError::NonFinite => RetrieverError::Diverged { epoch },
                other => other,
            })?;
            if !g.loss.is_finite() {
                return Err(RetrieverError::Diverged { epoch });
            }
            loss_sum += g.loss * batch.len() as f64;
            let norm = g.norm();
            let scale = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
            enc.query.weights.scaled_add(-cfg.learning_rate * scale, &g.query);
            enc.document.weights.scaled_add(-cfg.learning_rate * scale, &g.document);
        }
        let mean_loss = loss_sum / data.len() as f64;
        if !mean_loss.is_finite() {
            return Err(RetrieverError::Diverged { epoch });
        }
        let eval_top1 = match eval_pools {
            Some(pools) if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 => Some(evaluate_top1(&enc, pools, embeddings)?),
            _ => None,
        };
        log::debug!("epoch {epoch}: loss {mean_loss:.5} top1 {eval_top1:?}");
        log.push(EpochLog {
            epoch,
            mean_loss,
            eval_top1,
        });
    }
    Ok(TrainedRetriever { encoders: enc, log })
}

/// Fraction of pools in which the positive strictly outscores all negatives.
pub fn evaluate_top1(encoders: &EncoderPair, pools: &[EvalPool], embeddings: &TextEmbeddings) -> Result<f64, RetrieverError> {
    if pools.is_empty() {
        return Ok(0.0);
    }
    let hits = pools
        .par_iter()
        .map(|pool| -> Result<usize, RetrieverError> {
            pool.validate()?;
            let q: Array1<f64> = encoders.query.project(embeddings.get(&pool.query)?)?;
            let score = |text: &str| -> Result<f64, RetrieverError> {
                Ok(q.dot(&encoders.document.project(embeddings.get(text)?)?))
            };
            let pos = score(&pool.positive)?;
            for n in pool.random_negatives.iter().chain(&pool.hard_negatives) {
                if score(n)? >= pos {
                    return Ok(0);
                }
            }
            Ok(1)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / pools.len() as f64)
}

/// Builds evaluation pools from held-out triplets: random negatives are drawn
/// uniformly from `corpus`, hard negatives are the corpus texts closest to the
/// query under the base embeddings.
pub fn sample_eval_pools(
    triplets: &[TripletRecord],
    corpus: &[String],
    embeddings: &TextEmbeddings,
    seed: u64,
) -> Result<Vec<EvalPool>, RetrieverError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools = Vec::with_capacity(triplets.len());
    for t in triplets {
        let candidates: Vec<&String> = corpus.iter().filter(|c| **c != t.positive && **c != t.query).collect();
        if candidates.len() < 2 * EVAL_NEGATIVES {
            return Err(RetrieverError::Config(format!(
                "corpus too small for eval pools: need {} texts",
                2 * EVAL_NEGATIVES
            )));
        }
        let q = embeddings.get(&t.query)?;
        let mut scored: Vec<(f64, usize)> = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| Ok((q.dot(&embeddings.get(c)?), i)))
            .collect::<Result<_, RetrieverError>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let hard: Vec<usize> = scored.iter().take(EVAL_NEGATIVES).map(|s| s.1).collect();
        let mut rest: Vec<usize> = (0..candidates.len()).filter(|i| !hard.contains(i)).collect();
        rest.shuffle(&mut rng);
        let random: Vec<usize> = rest.into_iter().take(EVAL_NEGATIVES).collect();
        pools.push(EvalPool {
            query: t.query.clone(),
            positive: t.positive.clone(),
            random_negatives: random.iter().map(|&i| candidates[i].clone()).collect(),
            hard_negatives: hard.iter().map(|&i| candidates[i].clone()).collect(),
        });
    }
    Ok(pools)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::{Embedder, EmbeddingBackendConfig, HashedEmbedder};

    fn table(texts: &[String], dim: usize) -> TextEmbeddings {
        let emb = HashedEmbedder::new(EmbeddingBackendConfig::hashed(dim)).unwrap();
        TextEmbeddings::new(texts, emb.embed(texts).unwrap()).unwrap()
    }

    fn toy_triplets() -> Vec<TripletRecord> {
        (0..12)
            .map(|i| TripletRecord {
                query: format!("the film number {i} was wonderful"),
                positive: format!("the film number {i} was dreadful"),
                hard_negatives: vec![
                    format!("movie number {i} seemed wonderful"),
                    format!("the film number {i} was wonderful"),
                ],
            })
            .collect()
    }

    fn all_texts(ts: &[TripletRecord]) -> Vec<String> {
        ts.iter()
            .flat_map(|t| [t.query.clone(), t.positive.clone()].into_iter().chain(t.hard_negatives.clone()))
            .collect()
    }

    #[test]
    fn loss_decreases() {
        let ts = toy_triplets();
        let emb = table(&all_texts(&ts), 64);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(&ts, &emb, &cfg, None).unwrap();
        assert!(out.log.last().unwrap().mean_loss < out.log[0].mean_loss);
    }

    #[test]
    fn same_seed_gives_identical_weights() {
        let ts = toy_triplets();
        let emb = table(&all_texts(&ts), 32);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            seed: 17,
            ..TrainConfig::default()
        };
        let a = train(&ts, &emb, &cfg, None).unwrap();
        let b = train(&ts, &emb, &cfg, None).unwrap();
        assert_eq!(a.encoders, b.encoders);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            batch_size: 1,
            in_batch_negatives: false,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn missing_embedding_is_reported() {
        let ts = toy_triplets();
        let emb = table(&["unrelated".to_string()], 8);
        assert!(matches!(
            train(&ts, &emb, &TrainConfig::default(), None),
            Err(RetrieverError::MissingEmbedding(_))
        ));
    }

    fn pool_texts() -> (EvalPool, Vec<String>) {
        let pool = EvalPool {
            query: "q".into(),
            positive: "pos".into(),
            random_negatives: (0..30).map(|i| format!("r{i}")).collect(),
            hard_negatives: (0..30).map(|i| format!("h{i}")).collect(),
        };
        let mut texts = vec![pool.query.clone(), pool.positive.clone()];
        texts.extend(pool.random_negatives.clone());
        texts.extend(pool.hard_negatives.clone());
        (pool, texts)
    }

    #[test]
    fn zero_encoders_tie_and_score_zero() {
        let (pool, texts) = pool_texts();
        let emb = table(&texts, 16);
        let enc = EncoderPair {
            query: ProjectionEncoder::zeros(EncoderRole::Query, 16, 4),
            document: ProjectionEncoder::zeros(EncoderRole::Document, 16, 4),
        };
        assert_eq!(evaluate_top1(&enc, &[pool], &emb).unwrap(), 0.0);
    }

    #[test]
    fn positive_with_max_similarity_counts() {
        let (pool, texts) = pool_texts();
        // Base embeddings: the positive is e0, the query is e0, negatives are e1.
        let mut m = ndarray::Array2::zeros((texts.len(), 2));
        for (i, t) in texts.iter().enumerate() {
            let col = if t == "q" || t == "pos" { 0 } else { 1 };
            m[[i, col]] = 1.0;
        }
        let emb = TextEmbeddings::new(&texts, crate::embedder::EmbeddingMatrix::new(m).unwrap()).unwrap();
        let id = ndarray::Array2::eye(2);
        let enc = EncoderPair {
            query: ProjectionEncoder::new(EncoderRole::Query, id.clone()).unwrap(),
            document: ProjectionEncoder::new(EncoderRole::Document, id).unwrap(),
        };
        assert_eq!(evaluate_top1(&enc, &[pool], &emb).unwrap(), 1.0);
    }

    #[test]
    fn pool_validation() {
        let (mut pool, _) = pool_texts();
        pool.hard_negatives.pop();
        assert!(pool.validate().is_err());
        let (mut pool, _) = pool_texts();
        pool.random_negatives[0] = pool.positive.clone();
        assert!(pool.validate().is_err());
    }

    #[test]
    fn sampled_pools_are_valid() {
        let ts = toy_triplets();
        let corpus: Vec<String> = (0..80).map(|i| format!("corpus sentence {i} about films")).collect();
        let mut texts = all_texts(&ts);
        texts.extend(corpus.clone());
        let emb = table(&texts, 32);
        let pools = sample_eval_pools(&ts[..3], &corpus, &emb, 1).unwrap();
        assert_eq!(pools.len(), 3);
        for p in &pools {
            p.validate().unwrap();
        }
        assert_eq!(pools, sample_eval_pools(&ts[..3], &corpus, &emb, 1).unwrap());
    }
}
