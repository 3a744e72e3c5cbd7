use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{classify_perturbation, norm_levenshtein, self_bleu, z_statistics, MetricsError, PerturbationType, TokenBiasEntry};
use crate::dataset::{CounterfactualRecord, Stage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedExample {
    pub id: String,
    pub original_text: String,
    pub edited_text: String,
    pub original_label: String,
    pub new_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedCorpus {
    pairs: Vec<PairedExample>,
}

impl PairedCorpus {
    pub fn new(pairs: Vec<PairedExample>) -> Result<Self, MetricsError> {
        if pairs.is_empty() {
            return Err(MetricsError::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        for p in &pairs {
            if !seen.insert(p.id.as_str()) {
                return Err(MetricsError::DuplicateId(p.id.clone()));
            }
        }
        Ok(Self { pairs })
    }

    pub fn from_records(records: &[CounterfactualRecord]) -> Result<Self, MetricsError> {
        Self::new(
            records
                .iter()
                .map(|r| PairedExample {
                    id: r.source_id.clone(),
                    original_text: r.original_text.clone(),
                    edited_text: r.edited_text.clone(),
                    original_label: r.original_label.clone(),
                    new_label: r.target_label.clone(),
                })
                .collect(),
        )
    }

    pub fn pairs(&self) -> &[PairedExample] {
        &self.pairs
    }

    /// Both sides of every pair as (text, label) rows, the usual input to
    /// [`z_statistics`] for an augmented dataset.
    pub fn label_data(&self) -> Vec<(String, String)> {
        self.pairs
            .iter()
            .flat_map(|p| {
                [
                    (p.original_text.clone(), p.original_label.clone()),
                    (p.edited_text.clone(), p.new_label.clone()),
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub count: usize,
    pub mean_self_bleu: f64,
    pub mean_levenshtein: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pairs: usize,
    pub mean_self_bleu: f64,
    pub mean_levenshtein: f64,
    pub perturbation_histogram: BTreeMap<PerturbationType, usize>,
    pub designated_class: Option<String>,
    pub token_bias: Vec<TokenBiasEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stages: BTreeMap<Stage, StageSummary>,
}

/// Per-pair metrics are computed in parallel and reduced in input order, so
/// the result does not depend on the thread count.
pub fn aggregate_report(
    corpus: &PairedCorpus,
    label_data: Option<(&[(String, String)], &str)>,
    min_count: usize,
) -> Result<MetricsReport, MetricsError> {
    let per_pair: Vec<(f64, f64, PerturbationType)> = corpus
        .pairs
        .par_iter()
        .map(|p| {
            (
                self_bleu(&p.original_text, &p.edited_text),
                norm_levenshtein(&p.original_text, &p.edited_text),
                classify_perturbation(&p.original_text, &p.edited_text),
            )
        })
        .collect();
    let n = per_pair.len() as f64;
    let mut histogram: BTreeMap<PerturbationType, usize> = PerturbationType::ALL.iter().map(|t| (*t, 0)).collect();
    let (mut bleu, mut lev) = (0.0, 0.0);
    for (b, l, t) in &per_pair {
        bleu += b;
        lev += l;
        *histogram.get_mut(t).unwrap() += 1;
    }
    let (designated_class, token_bias) = match label_data {
        Some((data, class)) => (Some(class.to_string()), z_statistics(data, class, min_count)?),
        None => (None, Vec::new()),
    };
    Ok(MetricsReport {
        pairs: per_pair.len(),
        mean_self_bleu: bleu / n,
        mean_levenshtein: lev / n,
        perturbation_histogram: histogram,
        designated_class,
        token_bias,
        stages: BTreeMap::new(),
    })
}

/// Mean self-BLEU and Levenshtein per generation stage.
pub fn stage_summary(records: &[CounterfactualRecord]) -> BTreeMap<Stage, StageSummary> {
    let mut acc: BTreeMap<Stage, (usize, f64, f64)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.stage).or_default();
        e.0 += 1;
        e.1 += self_bleu(&r.original_text, &r.edited_text);
        e.2 += norm_levenshtein(&r.original_text, &r.edited_text);
    }
    acc.into_iter()
        .map(|(s, (c, b, l))| {
            (
                s,
                StageSummary {
                    count: c,
                    mean_self_bleu: b / c as f64,
                    mean_levenshtein: l / c as f64,
                },
            )
        })
        .collect()
}

/// Sanity check on real-backend output: edits built from retrieved words stay
/// closer to the original than raw retrievals do, but are not copies.
///
/// Requires `retrieved_only` self-BLEU < `core` self-BLEU < 1.
pub fn check_intrinsic_ordering(stages: &BTreeMap<Stage, StageSummary>) -> Result<(), MetricsError> {
    let get = |s: Stage, name: &str| stages.get(&s).ok_or_else(|| MetricsError::Ordering(format!("no {name} records")));
    let raw = get(Stage::RetrievedOnly, "retrieved_only")?;
    let core = get(Stage::Core, "core")?;
    if !(raw.mean_self_bleu < core.mean_self_bleu) {
        return Err(MetricsError::Ordering(format!(
            "core self-BLEU {:.4} is not above retrieved_only {:.4}",
            core.mean_self_bleu, raw.mean_self_bleu
        )));
    }
    if !(core.mean_self_bleu < 1.0) {
        return Err(MetricsError::Ordering("core edits are identical to their originals".into()));
    }
    Ok(())
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::RetrievedOnly => "retrieved_only",
        Stage::GptOnly => "gpt_only",
        Stage::Core => "core",
    }
}

impl MetricsReport {
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:>10}", "pairs", self.pairs);
        let _ = writeln!(out, "{:<22} {:>10.4}", "self-BLEU", self.mean_self_bleu);
        let _ = writeln!(out, "{:<22} {:>10.4}", "Levenshtein", self.mean_levenshtein);
        if !self.stages.is_empty() {
            let _ = writeln!(out, "\n{:<16} {:>6} {:>10} {:>12}", "stage", "count", "self-BLEU", "Levenshtein");
            for (s, v) in &self.stages {
                let _ = writeln!(
                    out,
                    "{:<16} {:>6} {:>10.4} {:>12.4}",
                    stage_name(*s),
                    v.count,
                    v.mean_self_bleu,
                    v.mean_levenshtein
                );
            }
        }
        let _ = writeln!(out, "\n{:<16} {:>6}", "perturbation", "count");
        for (t, c) in &self.perturbation_histogram {
            let _ = writeln!(out, "{:<16} {:>6}", t.as_str(), c);
        }
        if let Some(class) = &self.designated_class {
            let _ = writeln!(out, "\ntoken bias toward `{class}` (flagged only)");
            let _ = writeln!(out, "{:<20} {:>6} {:>6} {:>9}", "token", "n", "c", "z");
            for e in self.token_bias.iter().filter(|e| e.flagged) {
                let _ = writeln!(out, "{:<20} {:>6} {:>6} {:>9.3}", e.token, e.count, e.class_count, e.z);
            }
        }
        out
    }

    pub fn bias_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(["token", "count", "class_count", "z", "flagged"])?;
        for e in &self.token_bias {
            w.serialize(e)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
