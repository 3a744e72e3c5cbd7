//! Task pool, claims, submissions journal and reports for the two-condition
//! human editing study.
//!
//! Tasks alternate between the retrieval condition (shown up to three
//! retrieved excerpts) and the control condition (shown none) by position in
//! the pool. The journal is append-only JSON lines; the report is a pure
//! function of it, so replaying the file reproduces the live report.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::{read_jsonl, LabeledExample};
use crate::editor::label_wording;
use crate::metrics::{classify_perturbation, norm_levenshtein, self_bleu, PerturbationType};

pub const MAX_EXCERPTS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("task `{0}` not found")]
    NotFound(String),
    #[error("task `{0}` is already done")]
    Done(String),
    #[error("edited text is identical to the original; change at least one word")]
    Identical,
    #[error("invalid submission: {0}")]
    Invalid(String),
    #[error("no open task{}", .0.map(|c| format!(" in the {c} condition")).unwrap_or_default())]
    NoOpenTask(Option<Condition>),
    #[error("invalid task pool: {0}")]
    Pool(String),
    #[error("journal {path}: {reason}")]
    Journal { path: String, reason: String },
}

impl AnnotationError {
    /// HTTP status the API answers with.
    pub fn status_code(&self) -> u16 {
        match self {
            AnnotationError::NotFound(_) | AnnotationError::NoOpenTask(_) => 404,
            AnnotationError::Done(_) => 409,
            AnnotationError::Identical => 422,
            AnnotationError::Invalid(_) => 400,
            AnnotationError::Pool(_) | AnnotationError::Journal { .. } => 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Retrieval,
    Control,
}

impl Condition {
    pub fn for_position(i: usize) -> Self {
        if i.is_multiple_of(2) {
            Condition::Retrieval
        } else {
            Condition::Control
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Condition::Retrieval => "retrieval",
            Condition::Control => "control",
        })
    }
}

impl std::str::FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retrieval" => Ok(Condition::Retrieval),
            "control" => Ok(Condition::Control),
            other => Err(format!("unknown condition `{other}` (expected retrieval or control)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Open,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub instance: LabeledExample,
    pub target_label: String,
    pub condition: Condition,
    pub retrieved: Vec<String>,
    pub status: TaskStatus,
}

impl AnnotationTask {
    pub fn validate(&self) -> Result<(), AnnotationError> {
        let n = self.retrieved.len();
        let ok = match self.condition {
            Condition::Retrieval => (1..=MAX_EXCERPTS).contains(&n),
            Condition::Control => n == 0,
        };
        if !ok {
            return Err(AnnotationError::Pool(format!(
                "task `{}` in the {} condition has {n} excerpts",
                self.task_id, self.condition
            )));
        }
        if self.instance.task.flip_label(&self.instance.label) != Some(self.target_label.as_str()) {
            return Err(AnnotationError::Pool(format!(
                "task `{}`: target label must be the opposite class",
                self.task_id
            )));
        }
        Ok(())
    }
}

/// What the UI renders for a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub condition: Condition,
    /// Premise for NLI; absent for reviews.
    pub context: Option<String>,
    pub editable: String,
    pub label: String,
    pub label_wording: String,
    pub target_label: String,
    pub target_wording: String,
    pub retrieved: Vec<String>,
    pub status: TaskStatus,
}

impl From<&AnnotationTask> for TaskView {
    fn from(t: &AnnotationTask) -> Self {
        let ex = &t.instance;
        let wording = |l: &str| label_wording(ex.task, l).map(str::to_string).unwrap_or_else(|_| l.to_string());
        Self {
            task_id: t.task_id.clone(),
            condition: t.condition,
            context: ex.text_b.as_ref().map(|_| ex.text_a.clone()),
            editable: ex.editable_text().to_string(),
            label: ex.label.clone(),
            label_wording: wording(&ex.label),
            target_label: t.target_label.clone(),
            target_wording: wording(&t.target_label),
            retrieved: t.retrieved.clone(),
            status: t.status,
        }
    }
}

/// Builds the pool: position parity picks the condition, and retrieval
/// tasks get the first [`MAX_EXCERPTS`] texts from `fetch`.
pub fn build_pool<E>(
    examples: &[LabeledExample],
    mut fetch: impl FnMut(&LabeledExample) -> Result<Vec<String>, E>,
) -> Result<Vec<AnnotationTask>, E>
where
    E: From<AnnotationError>,
{
    let mut pool = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let condition = Condition::for_position(i);
        let retrieved = match condition {
            Condition::Retrieval => {
                let mut r = fetch(ex)?;
                r.truncate(MAX_EXCERPTS);
                r
            }
            Condition::Control => Vec::new(),
        };
        let target_label = ex
            .task
            .flip_label(&ex.label)
            .ok_or_else(|| AnnotationError::Pool(format!("example `{}` has a non-binary label", ex.id)))?
            .to_string();
        let task = AnnotationTask {
            task_id: ex.id.clone(),
            instance: ex.clone(),
            target_label,
            condition,
            retrieved,
            status: TaskStatus::Open,
        };
        task.validate()?;
        pool.push(task);
    }
    Ok(pool)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputedMetrics {
    pub self_bleu: f64,
    pub levenshtein: f64,
    pub perturbation_type: PerturbationType,
}

impl ComputedMetrics {
    pub fn between(original: &str, edited: &str) -> Self {
        Self {
            self_bleu: self_bleu(original, edited),
            levenshtein: norm_levenshtein(original, edited),
            perturbation_type: classify_perturbation(original, edited),
        }
    }
}

/// Request body of a submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionInput {
    pub edited_text: String,
    pub annotator_id: String,
    #[serde(default)]
    pub elapsed_ms: u64,
}

/// One journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSubmission {
    pub task_id: String,
    pub condition: Condition,
    pub edited_text: String,
    pub annotator_id: String,
    pub elapsed_ms: u64,
    pub computed: ComputedMetrics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub count: usize,
    pub mean_self_bleu: f64,
    pub mean_levenshtein: f64,
    pub mean_elapsed_ms: f64,
    pub perturbation_histogram: BTreeMap<PerturbationType, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub submissions: usize,
    pub conditions: BTreeMap<Condition, GroupSummary>,
    pub annotators: BTreeMap<String, GroupSummary>,
}

#[derive(Default)]
struct Acc {
    n: usize,
    bleu: f64,
    lev: f64,
    elapsed: f64,
    hist: BTreeMap<PerturbationType, usize>,
}

impl Acc {
    fn add(&mut self, s: &AnnotationSubmission) {
        self.n += 1;
        self.bleu += s.computed.self_bleu;
        self.lev += s.computed.levenshtein;
        self.elapsed += s.elapsed_ms as f64;
        *self.hist.entry(s.computed.perturbation_type).or_default() += 1;
    }

    fn finish(self) -> GroupSummary {
        let n = self.n as f64;
        GroupSummary {
            count: self.n,
            mean_self_bleu: self.bleu / n,
            mean_levenshtein: self.lev / n,
            mean_elapsed_ms: self.elapsed / n,
            perturbation_histogram: self.hist,
        }
    }
}

/// Per-condition and per-annotator means, accumulated in journal order.
pub fn build_report(submissions: &[AnnotationSubmission]) -> AnnotationReport {
    let mut conditions: BTreeMap<Condition, Acc> = BTreeMap::new();
    let mut annotators: BTreeMap<String, Acc> = BTreeMap::new();
    for s in submissions {
        conditions.entry(s.condition).or_default().add(s);
        annotators.entry(s.annotator_id.clone()).or_default().add(s);
    }
    AnnotationReport {
        submissions: submissions.len(),
        conditions: conditions.into_iter().map(|(k, a)| (k, a.finish())).collect(),
        annotators: annotators.into_iter().map(|(k, a)| (k, a.finish())).collect(),
    }
}

pub fn read_journal(path: &Path) -> Result<Vec<AnnotationSubmission>, AnnotationError> {
    let mut out = Vec::new();
    if !path.exists() {
        return Ok(out);
    }
    read_jsonl(path, |_, s: AnnotationSubmission| {
        out.push(s);
        Ok(())
    })
    .map_err(|e| AnnotationError::Journal {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(out)
}

/// Report recomputed from the journal file alone.
pub fn replay_report(path: &Path) -> Result<AnnotationReport, AnnotationError> {
    Ok(build_report(&read_journal(path)?))
}

struct Claim {
    annotator: Option<String>,
    at: Instant,
}

/// In-memory pool state backed by the journal. Not internally synchronized:
/// callers serialize access, which also serializes journal appends.
pub struct AnnotationStore {
    tasks: Vec<AnnotationTask>,
    by_id: HashMap<String, usize>,
    claims: HashMap<usize, Claim>,
    submissions: Vec<AnnotationSubmission>,
    journal_path: PathBuf,
    journal: File,
    claim_timeout: Duration,
}

impl AnnotationStore {
    /// Opens the pool, replaying any existing journal so completed tasks stay
    /// done across restarts.
    pub fn open(tasks: Vec<AnnotationTask>, journal_path: &Path, claim_timeout: Duration) -> Result<Self, AnnotationError> {
        let mut by_id = HashMap::new();
        for (i, t) in tasks.iter().enumerate() {
            t.validate()?;
            if by_id.insert(t.task_id.clone(), i).is_some() {
                return Err(AnnotationError::Pool(format!("duplicate task id `{}`", t.task_id)));
            }
        }
        let journal_err = |reason: String| AnnotationError::Journal {
            path: journal_path.display().to_string(),
            reason,
        };
        let submissions = read_journal(journal_path)?;
        let mut tasks = tasks;
        for s in &submissions {
            let i = *by_id
                .get(&s.task_id)
                .ok_or_else(|| journal_err(format!("unknown task `{}`", s.task_id)))?;
            tasks[i].status = TaskStatus::Done;
        }
        if let Some(dir) = journal_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| journal_err(e.to_string()))?;
        }
        let journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(journal_path)
            .map_err(|e| journal_err(e.to_string()))?;
        Ok(Self {
            tasks,
            by_id,
            claims: HashMap::new(),
            submissions,
            journal_path: journal_path.to_path_buf(),
            journal,
            claim_timeout,
        })
    }

    pub fn tasks(&self) -> &[AnnotationTask] {
        &self.tasks
    }

    pub fn submissions(&self) -> &[AnnotationSubmission] {
        &self.submissions
    }

    fn claimable(&self, i: usize, now: Instant) -> bool {
        self.tasks[i].status == TaskStatus::Open
            && self
                .claims
                .get(&i)
                .is_none_or(|c| now.saturating_duration_since(c.at) >= self.claim_timeout)
    }

    /// Claims the first open, unclaimed task (optionally of one condition).
    /// A claim lapses after the timeout and the task is served again.
    pub fn next(
        &mut self,
        condition: Option<Condition>,
        annotator: Option<&str>,
        now: Instant,
    ) -> Result<&AnnotationTask, AnnotationError> {
        let i = (0..self.tasks.len())
            .find(|&i| condition.is_none_or(|c| self.tasks[i].condition == c) && self.claimable(i, now))
            .ok_or(AnnotationError::NoOpenTask(condition))?;
        self.claims.insert(
            i,
            Claim {
                annotator: annotator.map(str::to_string),
                at: now,
            },
        );
        Ok(&self.tasks[i])
    }

    pub fn get(&self, task_id: &str) -> Result<&AnnotationTask, AnnotationError> {
        self.by_id
            .get(task_id)
            .map(|&i| &self.tasks[i])
            .ok_or_else(|| AnnotationError::NotFound(task_id.to_string()))
    }

    /// Who currently holds the task, if the claim is live.
    pub fn claimant(&self, task_id: &str, now: Instant) -> Option<&str> {
        let i = *self.by_id.get(task_id)?;
        let c = self.claims.get(&i)?;
        (now.saturating_duration_since(c.at) < self.claim_timeout)
            .then_some(c.annotator.as_deref())
            .flatten()
    }

    /// Validates the edit, computes its metrics, appends it to the journal
    /// and marks the task done.
    pub fn submit(&mut self, task_id: &str, input: SubmissionInput) -> Result<AnnotationSubmission, AnnotationError> {
        let i = *self
            .by_id
            .get(task_id)
            .ok_or_else(|| AnnotationError::NotFound(task_id.to_string()))?;
        let task = &self.tasks[i];
        if task.status == TaskStatus::Done {
            return Err(AnnotationError::Done(task_id.to_string()));
        }
        if input.annotator_id.trim().is_empty() {
            return Err(AnnotationError::Invalid("annotator_id must be non-empty".into()));
        }
        let edited = input.edited_text.trim();
        if edited.is_empty() {
            return Err(AnnotationError::Invalid("edited_text must be non-empty".into()));
        }
        let original = task.instance.editable_text();
        if edited == original.trim() {
            return Err(AnnotationError::Identical);
        }
        let submission = AnnotationSubmission {
            task_id: task_id.to_string(),
            condition: task.condition,
            edited_text: edited.to_string(),
            annotator_id: input.annotator_id,
            elapsed_ms: input.elapsed_ms,
            computed: ComputedMetrics::between(original, edited),
        };
        let mut line = serde_json::to_vec(&submission).expect("submission serializes");
        line.push(b'\n');
        self.journal
            .write_all(&line)
            .and_then(|_| self.journal.sync_data())
            .map_err(|e| AnnotationError::Journal {
                path: self.journal_path.display().to_string(),
                reason: e.to_string(),
            })?;
        self.tasks[i].status = TaskStatus::Done;
        self.claims.remove(&i);
        self.submissions.push(submission.clone());
        Ok(submission)
    }

    pub fn report(&self) -> AnnotationReport {
        build_report(&self.submissions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Task;

    fn examples(n: usize) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| LabeledExample {
                id: format!("t{i}"),
                task: Task::Nli,
                text_a: "You never call.".into(),
                text_b: Some(format!("You made some calls to number {i}.")),
                label: if i % 2 == 0 { "contradiction" } else { "entailment" }.into(),
            })
            .collect()
    }

    fn pool(n: usize) -> Vec<AnnotationTask> {
        build_pool::<AnnotationError>(&examples(n), |_| Ok(vec!["a".into(), "b".into(), "c".into(), "d".into()])).unwrap()
    }

    fn store(n: usize, dir: &Path) -> AnnotationStore {
        AnnotationStore::open(pool(n), &dir.join("journal.jsonl"), Duration::from_secs(1800)).unwrap()
    }

    fn input(text: &str) -> SubmissionInput {
        SubmissionInput {
            edited_text: text.into(),
            annotator_id: "ann".into(),
            elapsed_ms: 10,
        }
    }

    #[test]
    fn pool_alternates_conditions_and_caps_excerpts() {
        let p = pool(4);
        assert_eq!(p[0].condition, Condition::Retrieval);
        assert_eq!(p[0].retrieved.len(), 3);
        assert_eq!(p[1].condition, Condition::Control);
        assert!(p[1].retrieved.is_empty());
        assert_eq!(p[0].target_label, "entailment");
    }

    #[test]
    fn retrieval_task_without_excerpts_is_rejected() {
        let r = build_pool::<AnnotationError>(&examples(1), |_| Ok(vec![]));
        assert!(matches!(r, Err(AnnotationError::Pool(_))));
    }

    #[test]
    fn claims_are_exclusive_until_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(3, dir.path());
        let t0 = Instant::now();
        let a = s.next(None, Some("x"), t0).unwrap().task_id.clone();
        let b = s.next(None, Some("y"), t0).unwrap().task_id.clone();
        assert_eq!((a.as_str(), b.as_str()), ("t0", "t1"));
        assert_eq!(s.claimant("t0", t0), Some("x"));
        let c = s.next(Some(Condition::Retrieval), None, t0).unwrap().task_id.clone();
        assert_eq!(c, "t2");
        assert!(matches!(s.next(None, None, t0), Err(AnnotationError::NoOpenTask(None))));
        let later = t0 + Duration::from_secs(1800);
        assert_eq!(s.next(None, None, later).unwrap().task_id, "t0");
    }

    #[test]
    fn submission_rules() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(2, dir.path());
        let e = s.submit("t0", input("  You made some calls to number 0.  ")).unwrap_err();
        assert_eq!(e.status_code(), 422);
        assert_eq!(s.submit("zz", input("x")).unwrap_err().status_code(), 404);
        assert_eq!(s.submit("t0", input(" ")).unwrap_err().status_code(), 400);
        let ok = s.submit("t0", input("You made many calls to number 0.")).unwrap();
        assert_eq!(ok.computed.perturbation_type, PerturbationType::Quantifier);
        assert_eq!(ok.computed, ComputedMetrics::between("You made some calls to number 0.", "You made many calls to number 0."));
        assert_eq!(s.submit("t0", input("Something else.")).unwrap_err().status_code(), 409);
        assert_eq!(s.get("t0").unwrap().status, TaskStatus::Done);
    }

    #[test]
    fn journal_replay_reproduces_report_and_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.jsonl");
        let live = {
            let mut s = store(6, dir.path());
            for (i, who) in [(0, "a"), (1, "b"), (2, "a"), (5, "c")] {
                s.submit(
                    &format!("t{i}"),
                    SubmissionInput {
                        edited_text: format!("You always call number {i} today."),
                        annotator_id: who.into(),
                        elapsed_ms: 1000 + i as u64 * 7,
                    },
                )
                .unwrap();
            }
            s.report()
        };
        assert_eq!(live.submissions, 4);
        assert_eq!(live.conditions[&Condition::Retrieval].count, 2);
        assert_eq!(live.annotators["a"].count, 2);
        assert_eq!(replay_report(&path).unwrap(), live);

        let reopened = store(6, dir.path());
        assert_eq!(reopened.report(), live);
        assert_eq!(reopened.get("t5").unwrap().status, TaskStatus::Done);
        assert_eq!(reopened.get("t3").unwrap().status, TaskStatus::Open);
    }
}
