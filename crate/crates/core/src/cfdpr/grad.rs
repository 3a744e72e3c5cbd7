//! Analytic gradients of the mean batch contrastive loss with respect to both
//! projection matrices.

use ndarray::{Array1, Array2, Axis};

use super::{log_sum_exp, EncoderPair, RetrieverError};

/// Base embeddings of one training triplet.
#[derive(Debug, Clone)]
pub struct EmbeddedTriplet {
    pub query: Array1<f64>,
    pub positive: Array1<f64>,
    pub hard_negatives: Vec<Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct BatchGradients {
    /// Mean loss over the batch.
    pub loss: f64,
    pub query: Array2<f64>,
    pub document: Array2<f64>,
}

impl BatchGradients {
    pub fn norm(&self) -> f64 {
        (self.query.iter().chain(self.document.iter()).map(|g| g * g).sum::<f64>()).sqrt()
    }
}

/// Candidate documents for every query in a batch. Row `i` of `candidates`
/// lists document indices; the first is always the positive.
struct Layout {
    docs: Array2<f64>,
    candidates: Vec<Vec<usize>>,
}

fn layout(batch: &[EmbeddedTriplet], in_batch_negatives: bool) -> Layout {
    let d_in = batch[0].query.len();
    let n_docs = batch.len() + batch.iter().map(|t| t.hard_negatives.len()).sum::<usize>();
    let mut docs = Array2::zeros((n_docs, d_in));
    // positives occupy rows 0..B, hard negatives follow
    for (i, t) in batch.iter().enumerate() {
        docs.row_mut(i).assign(&t.positive);
    }
    let mut next = batch.len();
    let mut candidates = Vec::with_capacity(batch.len());
    for (i, t) in batch.iter().enumerate() {
        let mut c = vec![i];
        for n in &t.hard_negatives {
            docs.row_mut(next).assign(n);
            c.push(next);
            next += 1;
        }
        if in_batch_negatives {
            c.extend((0..batch.len()).filter(|&j| j != i));
        }
        candidates.push(c);
    }
    Layout { docs, candidates }
}

/// Mean loss and gradients for `batch`. With `in_batch_negatives`, every other
/// positive in the batch is an extra negative for each query.
pub fn loss_gradients(
    batch: &[EmbeddedTriplet],
    encoders: &EncoderPair,
    in_batch_negatives: bool,
) -> Result<BatchGradients, RetrieverError> {
    if batch.is_empty() {
        return Err(RetrieverError::Config("empty batch".into()));
    }
    let d_in = encoders.query.input_dim();
    if encoders.document.input_dim() != d_in {
        return Err(RetrieverError::DimensionMismatch(encoders.document.input_dim(), d_in));
    }
    if encoders.query.output_dim() != encoders.document.output_dim() {
        return Err(RetrieverError::DimensionMismatch(
            encoders.query.output_dim(),
            encoders.document.output_dim(),
        ));
    }
    for t in batch {
        if t.hard_negatives.is_empty() && !(in_batch_negatives && batch.len() > 1) {
            return Err(RetrieverError::Config("triplet without negatives".into()));
        }
        for v in std::iter::once(&t.query).chain(std::iter::once(&t.positive)).chain(&t.hard_negatives) {
            if v.len() != d_in {
                return Err(RetrieverError::DimensionMismatch(v.len(), d_in));
            }
        }
    }

    let Layout { docs, candidates } = layout(batch, in_batch_negatives);
    let queries = ndarray::stack(Axis(0), &batch.iter().map(|t| t.query.view()).collect::<Vec<_>>())
        .expect("uniform query width");
    let u = queries.dot(&encoders.query.weights); // B x d_out
    let v = docs.dot(&encoders.document.weights); // D x d_out

    let b = batch.len() as f64;
    let mut d_u = Array2::<f64>::zeros(u.raw_dim());
    let mut d_v = Array2::<f64>::zeros(v.raw_dim());
    let mut total = 0.0;
    for (i, cand) in candidates.iter().enumerate() {
        let ui = u.row(i);
        let sims: Vec<f64> = cand.iter().map(|&c| ui.dot(&v.row(c))).collect();
        if sims.iter().any(|s| !s.is_finite()) {
            return Err(RetrieverError::NonFiniteGradient { item: i });
        }
        let lse = log_sum_exp(sims.iter().copied());
        total += lse - sims[0];
        for (k, (&c, s)) in cand.iter().zip(&sims).enumerate() {
            // d loss_i / d s_ik = softmax_k - [k == 0], scaled for the batch mean
            let g = ((s - lse).exp() - if k == 0 { 1.0 } else { 0.0 }) / b;
            d_u.row_mut(i).scaled_add(g, &v.row(c));
            d_v.row_mut(c).scaled_add(g, &ui);
        }
    }

    let grad_q = queries.t().dot(&d_u);
    let grad_d = docs.t().dot(&d_v);
    if let Some(pos) = grad_q.iter().chain(grad_d.iter()).position(|g| !g.is_finite()) {
        let per_item = grad_q.len() / batch.len().max(1);
        return Err(RetrieverError::NonFiniteGradient {
            item: (pos / per_item.max(1)).min(batch.len() - 1),
        });
    }
    Ok(BatchGradients {
        loss: total / b,
        query: grad_q,
        document: grad_d,
    })
}

/// Mean batch loss without gradients.
#[cfg(test)]
fn batch_loss(batch: &[EmbeddedTriplet], encoders: &EncoderPair, in_batch_negatives: bool) -> f64 {
    let Layout { docs, candidates } = layout(batch, in_batch_negatives);
    let v = docs.dot(&encoders.document.weights);
    let mut total = 0.0;
    for (t, cand) in batch.iter().zip(&candidates) {
        let ui = t.query.dot(&encoders.query.weights);
        let sims: Vec<f64> = cand.iter().map(|&c| ui.dot(&v.row(c))).collect();
        total += log_sum_exp(sims.iter().copied()) - sims[0];
    }
    total / batch.len() as f64
}
