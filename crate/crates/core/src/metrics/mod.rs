//! Intrinsic metrics for counterfactual edits: closeness (token Levenshtein),
//! diversity (self-BLEU), token/label bias (z-statistics) and the edit type.

mod bias;
mod perturbation;
mod report;

pub use bias::{z_statistics, z_value, TokenBiasEntry};
pub use perturbation::{classify_perturbation, edit_regions, EditRegion, PerturbationType};
pub use report::{
    aggregate_report, check_intrinsic_ordering, stage_summary, MetricsReport, PairedCorpus, PairedExample, StageSummary,
};

use std::collections::HashMap;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("label space must be binary, found {0} labels")]
    NonBinaryLabels(usize),
    #[error("designated class `{0}` has prior {1}; z is undefined")]
    DegeneratePrior(String, f64),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("duplicate pair id `{0}`")]
    DuplicateId(String),
    #[error("intrinsic ordering violated: {0}")]
    Ordering(String),
}

pub fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Levenshtein distance between two token sequences.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level Levenshtein distance divided by the longer token count.
pub fn norm_levenshtein(original: &str, edited: &str) -> f64 {
    let (a, b) = (tokens(original), tokens(edited));
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 0.0;
    }
    levenshtein(&a, &b) as f64 / denom as f64
}

fn ngram_counts<'a>(toks: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    for g in toks.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// BLEU of `edited` against `original` as the single reference.
///
/// Orders 1..=min(4, |edited|); add-one smoothing for orders >= 2; brevity
/// penalty when the candidate is shorter than the reference.
pub fn self_bleu(original: &str, edited: &str) -> f64 {
    let reference = tokens(original);
    let cand = tokens(edited);
    if cand.is_empty() {
        return 0.0;
    }
    let max_n = cand.len().min(4);
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let c = ngram_counts(&cand, n);
        let r = ngram_counts(&reference, n);
        let matched: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
        let total = cand.len() + 1 - n;
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let bp = if cand.len() < reference.len() {
        (1.0 - reference.len() as f64 / cand.len() as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / max_n as f64).exp()
}
