//! Token/label association z-statistics.
//!
//! A token is counted once per document in which it appears. With `p0` the
//! share of documents carrying the designated class, each token gets
//! `z = (c - n p0) / sqrt(n p0 (1 - p0))`, flagged when `|z|` exceeds the
//! two-sided normal quantile at `0.01 / V` for a vocabulary of size `V`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::MetricsError;
use crate::extraction::strip_punctuation;

const ALPHA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBiasEntry {
    pub token: String,
    pub count: usize,
    pub class_count: usize,
    pub z: f64,
    pub flagged: bool,
}

pub fn z_value(class_count: usize, count: usize, p0: f64) -> f64 {
    let n = count as f64;
    (class_count as f64 - n * p0) / (n * p0 * (1.0 - p0)).sqrt()
}

fn doc_tokens(text: &str) -> BTreeSet<String> {
    text.split_whitespace()
        .map(|t| strip_punctuation(t).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Entries for tokens seen in at least `min_count` documents, sorted by
/// descending `|z|` then token.
pub fn z_statistics(
    dataset: &[(String, String)],
    designated_class: &str,
    min_count: usize,
) -> Result<Vec<TokenBiasEntry>, MetricsError> {
    let labels: BTreeSet<&str> = dataset.iter().map(|(_, l)| l.as_str()).collect();
    if labels.len() != 2 {
        return Err(MetricsError::NonBinaryLabels(labels.len()));
    }
    let designated = dataset.iter().filter(|(_, l)| l == designated_class).count();
    let p0 = designated as f64 / dataset.len() as f64;
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(MetricsError::DegeneratePrior(designated_class.into(), p0));
    }
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (text, label) in dataset {
        let hit = usize::from(label == designated_class);
        for tok in doc_tokens(text) {
            let e = counts.entry(tok).or_default();
            e.0 += 1;
            e.1 += hit;
        }
    }
    let vocab = counts.len().max(1) as f64;
    let threshold = Normal::standard().inverse_cdf(1.0 - ALPHA / (2.0 * vocab));
    let mut out: Vec<TokenBiasEntry> = counts
        .into_iter()
        .filter(|(_, (n, _))| *n >= min_count.max(1))
        .map(|(token, (n, c))| {
            let z = z_value(c, n, p0);
            TokenBiasEntry {
                token,
                count: n,
                class_count: c,
                z,
                flagged: z.abs() > threshold,
            }
        })
        .collect();
    out.sort_by(|a, b| b.z.abs().total_cmp(&a.z.abs()).then_with(|| a.token.cmp(&b.token)));
    Ok(out)
}
