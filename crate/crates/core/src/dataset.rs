//! Domain records, line-delimited JSON persistence, query construction and
//! retriever training-triplet assembly.
//!
//! Every dataset file is UTF-8 with one JSON object per line. Field names are
//! exactly the struct field names below.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Separator token placed between premise and hypothesis in NLI queries.
pub const SEP_TOKEN: &str = "[SEP]";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid JSON: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("record `{id}`: field `{field}`: {reason}")]
    Invalid {
        id: String,
        field: &'static str,
        reason: String,
    },
    #[error("duplicate id `{id}` at line {line}")]
    Duplicate { id: String, line: usize },
}

impl DatasetError {
    fn invalid(id: &str, field: &'static str, reason: impl Into<String>) -> Self {
        DatasetError::Invalid {
            id: id.to_string(),
            field,
            reason: reason.into(),
        }
    }
}

/// Classification task an example belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sentiment,
    Nli,
}

impl Task {
    /// The binary label set. Neutral is not part of the NLI set.
    pub fn labels(self) -> [&'static str; 2] {
        match self {
            Task::Sentiment => ["Positive", "Negative"],
            Task::Nli => ["entailment", "contradiction"],
        }
    }

    pub fn is_valid_label(self, label: &str) -> bool {
        self.labels().contains(&label)
    }

    /// The opposite class of a binary label.
    pub fn flip_label(self, label: &str) -> Option<&'static str> {
        let [a, b] = self.labels();
        if label == a {
            Some(b)
        } else if label == b {
            Some(a)
        } else {
            None
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Sentiment => f.write_str("sentiment"),
            Task::Nli => f.write_str("nli"),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sentiment" => Ok(Task::Sentiment),
            "nli" => Ok(Task::Nli),
            other => Err(format!("unknown task `{other}` (expected sentiment or nli)")),
        }
    }
}

/// One task instance: a review, or a premise/hypothesis pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub task: Task,
    pub text_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    pub label: String,
}

impl LabeledExample {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.id.trim().is_empty() {
            return Err(DatasetError::invalid(&self.id, "id", "must be non-empty"));
        }
        if self.text_a.trim().is_empty() {
            return Err(DatasetError::invalid(&self.id, "text_a", "must be non-empty"));
        }
        match (self.task, &self.text_b) {
            (Task::Nli, None) => {
                return Err(DatasetError::invalid(
                    &self.id,
                    "text_b",
                    "required for nli examples",
                ))
            }
            (Task::Nli, Some(b)) if b.trim().is_empty() => {
                return Err(DatasetError::invalid(&self.id, "text_b", "must be non-empty"))
            }
            (Task::Sentiment, Some(_)) => {
                return Err(DatasetError::invalid(
                    &self.id,
                    "text_b",
                    "only allowed for nli examples",
                ))
            }
            _ => {}
        }
        if !self.task.is_valid_label(&self.label) {
            let [a, b] = self.task.labels();
            return Err(DatasetError::invalid(
                &self.id,
                "label",
                format!("`{}` is not one of {a}, {b}", self.label),
            ));
        }
        Ok(())
    }

    /// The text an editor rewrites: the hypothesis for NLI, the review otherwise.
    pub fn editable_text(&self) -> &str {
        match self.task {
            Task::Nli => self.text_b.as_deref().unwrap_or(&self.text_a),
            Task::Sentiment => &self.text_a,
        }
    }
}

/// One sentence or excerpt of the search corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub doc_id: String,
    pub text: String,
    pub source: String,
}

impl CorpusDocument {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.doc_id.is_empty() {
            return Err(DatasetError::invalid(&self.doc_id, "doc_id", "must be non-empty"));
        }
        if normalize_whitespace(&self.text).is_empty() {
            return Err(DatasetError::invalid(&self.doc_id, "text", "empty after whitespace normalization"));
        }
        Ok(())
    }
}

/// A human-authored (query, counterfactual) seed pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPair {
    pub id: String,
    pub query: String,
    pub positive: String,
}

/// A paraphrase of a seed query, used as a hard negative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paraphrase {
    pub query: String,
    pub paraphrase: String,
}

/// Retriever training unit: a query, its counterfactual and hard negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub query: String,
    pub positive: String,
    pub hard_negatives: Vec<String>,
}

impl TripletRecord {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.positive == self.query {
            return Err(DatasetError::invalid(&self.query, "positive", "equals the query"));
        }
        if self.hard_negatives.is_empty() {
            return Err(DatasetError::invalid(&self.query, "hard_negatives", "must be non-empty"));
        }
        if self.hard_negatives.contains(&self.positive) {
            return Err(DatasetError::invalid(&self.query, "hard_negatives", "contains the positive"));
        }
        Ok(())
    }
}

/// Which parts of the generation pipeline produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    RetrievedOnly,
    GptOnly,
    Core,
}

/// Per-record intrinsic metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub self_bleu: f64,
    pub levenshtein: f64,
    pub perturbation_type: crate::metrics::PerturbationType,
}

/// A generated counterfactual with provenance.
///
/// Serialized key order: `source_id`, `original_text`, `edited_text`,
/// `original_label`, `target_label`, `keywords`, `retrieved_doc_ids`, `stage`,
/// `metrics`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    pub source_id: String,
    pub original_text: String,
    pub edited_text: String,
    pub original_label: String,
    pub target_label: String,
    pub keywords: Vec<String>,
    pub retrieved_doc_ids: Vec<String>,
    pub stage: Stage,
    #[serde(default)]
    pub metrics: Option<RecordMetrics>,
}

impl CounterfactualRecord {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.target_label == self.original_label {
            return Err(DatasetError::invalid(
                &self.source_id,
                "target_label",
                "must differ from original_label",
            ));
        }
        if self.stage == Stage::Core {
            if self.keywords.is_empty() {
                return Err(DatasetError::invalid(&self.source_id, "keywords", "empty for stage=core"));
            }
            if self.retrieved_doc_ids.is_empty() {
                return Err(DatasetError::invalid(
                    &self.source_id,
                    "retrieved_doc_ids",
                    "empty for stage=core",
                ));
            }
        }
        Ok(())
    }
}

pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reads a line-delimited JSON file. Blank lines are skipped; the closure sees
/// the 1-based line number of each record.
pub fn read_jsonl<T, F>(path: &Path, mut visit: F) -> Result<(), DatasetError>
where
    T: DeserializeOwned,
    F: FnMut(usize, T) -> Result<(), DatasetError>,
{
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| DatasetError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        visit(idx + 1, value)?;
    }
    Ok(())
}

pub fn read_jsonl_vec<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let mut out = Vec::new();
    read_jsonl(path, |_, v| {
        out.push(v);
        Ok(())
    })?;
    Ok(out)
}

/// Writes one JSON object per line through a temp file renamed into place.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        for item in items {
            serde_json::to_writer(&mut w, item).map_err(|e| io_err(e.into()))?;
            w.write_all(b"\n").map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
    }
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Loads and validates a task dataset; duplicate ids are rejected.
pub fn load_examples(path: &Path, task: Task) -> Result<Vec<LabeledExample>, DatasetError> {
    #[derive(Deserialize)]
    struct Line {
        id: String,
        task: Option<Task>,
        text_a: String,
        text_b: Option<String>,
        label: String,
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    read_jsonl(path, |line_no, line: Line| {
        if let Some(t) = line.task {
            if t != task {
                return Err(DatasetError::invalid(
                    &line.id,
                    "task",
                    format!("`{t}` does not match requested task `{task}`"),
                ));
            }
        }
        let ex = LabeledExample {
            id: line.id,
            task,
            text_a: line.text_a,
            text_b: line.text_b,
            label: line.label,
        };
        ex.validate()?;
        if !seen.insert(ex.id.clone()) {
            return Err(DatasetError::Duplicate { id: ex.id, line: line_no });
        }
        out.push(ex);
        Ok(())
    })?;
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusDocument>, DatasetError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    read_jsonl(path, |line_no, doc: CorpusDocument| {
        doc.validate()?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(DatasetError::Duplicate { id: doc.doc_id, line: line_no });
        }
        out.push(doc);
        Ok(())
    })?;
    Ok(out)
}

/// Builds the retriever query: the review itself, or `premise [SEP] hypothesis`.
pub fn build_query_text(ex: &LabeledExample) -> Result<String, DatasetError> {
    if ex.text_a.trim().is_empty() {
        return Err(DatasetError::invalid(&ex.id, "text_a", "must be non-empty"));
    }
    if ex.text_a.contains(SEP_TOKEN) || ex.text_b.as_deref().is_some_and(|b| b.contains(SEP_TOKEN)) {
        log::warn!("example `{}` contains the literal {SEP_TOKEN} token", ex.id);
    }
    match ex.task {
        Task::Sentiment => Ok(ex.text_a.clone()),
        Task::Nli => {
            let b = ex
                .text_b
                .as_deref()
                .filter(|b| !b.trim().is_empty())
                .ok_or_else(|| DatasetError::invalid(&ex.id, "text_b", "required for nli examples"))?;
            Ok(format!("{} {SEP_TOKEN} {}", ex.text_a, b))
        }
    }
}

/// Seed pair rejected during triplet assembly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletBuild {
    pub triplets: Vec<TripletRecord>,
    pub rejected: Vec<Rejection>,
    /// Ids of pairs that had no paraphrase and fell back to `[query]`.
    pub missing_paraphrase: Vec<String>,
}

/// Assembles training triplets. Hard negatives are `[paraphrase(q), q]`, or
/// just `[q]` when no paraphrase is available.
pub fn build_triplets(
    seed_pairs: &[SeedPair],
    paraphrases: &HashMap<String, String>,
) -> Result<TripletBuild, DatasetError> {
    let mut build = TripletBuild::default();
    for pair in seed_pairs {
        if pair.query.trim().is_empty() {
            return Err(DatasetError::invalid(&pair.id, "query", "must be non-empty"));
        }
        if pair.positive == pair.query {
            log::warn!("seed pair `{}` rejected: positive equals query", pair.id);
            build.rejected.push(Rejection {
                id: pair.id.clone(),
                reason: "positive equals query".into(),
            });
            continue;
        }
        let hard_negatives = match paraphrases.get(&pair.query) {
            Some(p) => vec![p.clone(), pair.query.clone()],
            None => {
                log::warn!("seed pair `{}` has no paraphrase; using the query as sole hard negative", pair.id);
                build.missing_paraphrase.push(pair.id.clone());
                vec![pair.query.clone()]
            }
        };
        let triplet = TripletRecord {
            query: pair.query.clone(),
            positive: pair.positive.clone(),
            hard_negatives,
        };
        if let Err(e) = triplet.validate() {
            log::warn!("seed pair `{}` rejected: {e}", pair.id);
            build.rejected.push(Rejection {
                id: pair.id.clone(),
                reason: e.to_string(),
            });
            continue;
        }
        build.triplets.push(triplet);
    }
    Ok(build)
}

/// Validates every record before touching the file.
pub fn write_records(records: &[CounterfactualRecord], path: &Path) -> Result<(), DatasetError> {
    for r in records {
        r.validate()?;
    }
    write_jsonl(path, records)
}

pub fn load_records(path: &Path) -> Result<Vec<CounterfactualRecord>, DatasetError> {
    let mut out = Vec::new();
    read_jsonl(path, |_, r: CounterfactualRecord| {
        r.validate()?;
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn nli(id: &str, a: &str, b: &str, label: &str) -> LabeledExample {
        LabeledExample {
            id: id.into(),
            task: Task::Nli,
            text_a: a.into(),
            text_b: Some(b.into()),
            label: label.into(),
        }
    }

    fn record(id: &str) -> CounterfactualRecord {
        CounterfactualRecord {
            source_id: id.into(),
            original_text: "bad film".into(),
            edited_text: "good film".into(),
            original_label: "Negative".into(),
            target_label: "Positive".into(),
            keywords: vec!["good".into()],
            retrieved_doc_ids: vec!["d1".into()],
            stage: Stage::Core,
            metrics: None,
        }
    }

    #[test]
    fn loads_valid_file() {
        let f = write_lines(&[
            r#"{"id":"1","task":"nli","text_a":"p1","text_b":"h1","label":"entailment"}"#,
            r#"{"id":"2","task":"nli","text_a":"p2","text_b":"h2","label":"contradiction"}"#,
            r#"{"id":"3","text_a":"p3","text_b":"h3","label":"entailment"}"#,
        ]);
        let got = load_examples(f.path(), Task::Nli).unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got[2], nli("3", "p3", "h3", "entailment"));
    }

    #[test]
    fn missing_hypothesis_names_field() {
        let f = write_lines(&[r#"{"id":"1","task":"nli","text_a":"p","label":"entailment"}"#]);
        let err = load_examples(f.path(), Task::Nli).unwrap_err();
        assert!(err.to_string().contains("text_b"), "{err}");
    }

    #[test]
    fn neutral_is_rejected() {
        let f = write_lines(&[r#"{"id":"1","task":"nli","text_a":"p","text_b":"h","label":"neutral"}"#]);
        let err = load_examples(f.path(), Task::Nli).unwrap_err();
        assert!(matches!(err, DatasetError::Invalid { field: "label", .. }), "{err}");
    }

    #[test]
    fn parse_error_reports_line() {
        let f = write_lines(&[
            r#"{"id":"1","task":"sentiment","text_a":"ok","label":"Positive"}"#,
            "{not json",
        ]);
        match load_examples(f.path(), Task::Sentiment).unwrap_err() {
            DatasetError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write_lines(&[
            r#"{"id":"1","task":"sentiment","text_a":"a","label":"Positive"}"#,
            r#"{"id":"1","task":"sentiment","text_a":"b","label":"Negative"}"#,
        ]);
        assert!(matches!(
            load_examples(f.path(), Task::Sentiment).unwrap_err(),
            DatasetError::Duplicate { line: 2, .. }
        ));
    }

    #[test]
    fn nli_query_uses_sep_token() {
        let ex = nli("x", "You never call.", "You rarely call on the phone, nor webcam.", "entailment");
        assert_eq!(
            build_query_text(&ex).unwrap(),
            "You never call. [SEP] You rarely call on the phone, nor webcam."
        );
    }

    #[test]
    fn sentiment_query_is_identity() {
        let ex = LabeledExample {
            id: "r".into(),
            task: Task::Sentiment,
            text_a: "A fine film.".into(),
            text_b: None,
            label: "Positive".into(),
        };
        assert_eq!(build_query_text(&ex).unwrap(), "A fine film.");
    }

    #[test]
    fn empty_premise_is_an_error() {
        let ex = nli("x", "", "h", "entailment");
        assert!(build_query_text(&ex).is_err());
    }

    #[test]
    fn triplet_with_paraphrase_has_two_hard_negatives() {
        let pairs = vec![SeedPair {
            id: "s1".into(),
            query: "q".into(),
            positive: "p".into(),
        }];
        let para = HashMap::from([("q".to_string(), "q'".to_string())]);
        let build = build_triplets(&pairs, &para).unwrap();
        assert_eq!(build.triplets.len(), 1);
        assert_eq!(build.triplets[0].hard_negatives, vec!["q'".to_string(), "q".to_string()]);
        assert!(build.missing_paraphrase.is_empty());
    }

    #[test]
    fn triplet_without_paraphrase_falls_back() {
        let pairs = vec![SeedPair {
            id: "s1".into(),
            query: "q".into(),
            positive: "p".into(),
        }];
        let build = build_triplets(&pairs, &HashMap::new()).unwrap();
        assert_eq!(build.triplets.len(), 1);
        assert_eq!(build.triplets[0].hard_negatives, vec!["q".to_string()]);
        assert_eq!(build.missing_paraphrase, vec!["s1".to_string()]);
    }

    #[test]
    fn triplet_with_positive_equal_query_is_rejected() {
        let pairs = vec![SeedPair {
            id: "bad".into(),
            query: "same".into(),
            positive: "same".into(),
        }];
        let build = build_triplets(&pairs, &HashMap::new()).unwrap();
        assert!(build.triplets.is_empty());
        assert_eq!(build.rejected[0].id, "bad");
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.jsonl");
        let records: Vec<_> = (0..5).map(|i| record(&i.to_string())).collect();
        write_records(&records, &path).unwrap();
        assert_eq!(load_records(&path).unwrap(), records);
    }

    #[test]
    fn empty_record_list_writes_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.jsonl");
        write_records(&[], &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
    }

    #[test]
    fn unflipped_record_fails_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.jsonl");
        let mut bad = record("1");
        bad.target_label = bad.original_label.clone();
        assert!(write_records(&[record("0"), bad], &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn record_keys_are_in_documented_order() {
        let line = serde_json::to_string(&record("1")).unwrap();
        let keys = [
            "source_id",
            "original_text",
            "edited_text",
            "original_label",
            "target_label",
            "keywords",
            "retrieved_doc_ids",
            "stage",
            "metrics",
        ];
        let positions: Vec<_> = keys.iter().map(|k| line.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn flip_label_is_an_involution() {
        for task in [Task::Sentiment, Task::Nli] {
            for l in task.labels() {
                assert_eq!(task.flip_label(task.flip_label(l).unwrap()), Some(l));
            }
        }
        assert_eq!(Task::Nli.flip_label("neutral"), None);
    }
}
