//! Few-shot prompts for keyword-constrained counterfactual editing, the LLM
//! backends that complete them, and parsing of the returned edit.
//!
//! Templates are TOML data files (see `templates/`). The crate bundles one
//! per task; [`PromptTemplate::from_file`] loads replacements.

mod backend;

pub use backend::{request_edit, request_key, EditParams, EditRequest, LlmBackend, MockLlm, RemoteLlm};

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::dataset::{LabeledExample, Task};
use crate::http::HttpError;

#[derive(Debug, thiserror::Error)]
pub enum EditorError {
    #[error("template: {0}")]
    Template(String),
    #[error("unknown label `{label}` for task {task}")]
    UnknownLabel { task: Task, label: String },
    #[error("target label equals the instance label `{0}`")]
    SameLabel(String),
    #[error("instance {id} lacks required field `{field}`")]
    MissingField { id: String, field: &'static str },
    #[error("keyword list is empty; use the no-keyword prompt")]
    NoKeywords,
    #[error("invalid edit parameters: {0}")]
    Params(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error(transparent)]
    Http(#[from] HttpError),
}

/// Why a completion could not be used as an edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditFailure {
    Empty,
    Unchanged,
}

impl std::fmt::Display for EditFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Empty => "empty edit",
            Self::Unchanged => "edit identical to the original",
        })
    }
}

/// Where a rendered field takes its value from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldValue {
    TextA,
    TextB,
    Label,
    TargetLabel,
    Keywords,
    Edited,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Field {
    pub label: String,
    pub value: FieldValue,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Line {
    pub fields: Vec<Field>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Demonstration {
    pub text_a: String,
    #[serde(default)]
    pub text_b: Option<String>,
    pub label: String,
    pub target_label: String,
    pub keywords: Vec<String>,
    pub edited: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct PromptTemplate {
    pub task: Task,
    pub instructions: String,
    pub instructions_without_keywords: String,
    pub keywords_label: String,
    pub edited_label: String,
    pub label_wording: BTreeMap<String, String>,
    pub layout: Vec<Line>,
    pub demonstrations: Vec<Demonstration>,
}

/// Number of demonstrations each bundled template carries.
pub fn expected_demonstrations(task: Task) -> usize {
    match task {
        Task::Nli => 4,
        Task::Sentiment => 2,
    }
}

/// Fixed wording of a label inside prompts.
pub fn label_wording(task: Task, label: &str) -> Result<&'static str, EditorError> {
    match (task, label) {
        (Task::Nli, "entailment") => Ok("definitely True"),
        (Task::Nli, "contradiction") => Ok("definitely False"),
        (Task::Sentiment, "Positive") => Ok("Positive"),
        (Task::Sentiment, "Negative") => Ok("Negative"),
        _ => Err(EditorError::UnknownLabel {
            task,
            label: label.to_string(),
        }),
    }
}

/// `['a', 'b']`
pub fn render_keywords(keywords: &[String]) -> String {
    let quoted: Vec<String> = keywords.iter().map(|k| format!("'{k}'")).collect();
    format!("[{}]", quoted.join(", "))
}

struct Values<'a> {
    text_a: &'a str,
    text_b: Option<&'a str>,
    label: &'a str,
    target_label: &'a str,
    keywords: &'a [String],
    edited: Option<&'a str>,
}

impl PromptTemplate {
    pub fn builtin(task: Task) -> Self {
        let text = match task {
            Task::Nli => include_str!("../../templates/nli.toml"),
            Task::Sentiment => include_str!("../../templates/sentiment.toml"),
        };
        Self::parse(text).expect("bundled template is valid")
    }

    pub fn parse(text: &str) -> Result<Self, EditorError> {
        let t: Self = toml::from_str(text).map_err(|e| EditorError::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn from_file(path: &Path) -> Result<Self, EditorError> {
        let text = std::fs::read_to_string(path).map_err(|e| EditorError::Template(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn fields(&self) -> impl Iterator<Item = &Field> {
        self.layout.iter().flat_map(|l| &l.fields)
    }

    pub fn validate(&self) -> Result<(), EditorError> {
        let bad = |m: String| Err(EditorError::Template(m));
        let want = expected_demonstrations(self.task);
        if self.demonstrations.len() != want {
            return bad(format!("{} template needs {want} demonstrations, has {}", self.task, self.demonstrations.len()));
        }
        if self.fields().any(|f| f.label.trim().is_empty()) || self.keywords_label.trim().is_empty() {
            return bad("field labels must be non-empty".into());
        }
        let count = |v: FieldValue| self.fields().filter(|f| f.value == v).count();
        for v in [FieldValue::TextA, FieldValue::Label, FieldValue::TargetLabel, FieldValue::Keywords, FieldValue::Edited] {
            if count(v) != 1 {
                return bad(format!("layout must contain exactly one {v:?} field"));
            }
        }
        if (self.task == Task::Nli) != (count(FieldValue::TextB) == 1) || count(FieldValue::TextB) > 1 {
            return bad("text_b field is required for nli and only for nli".into());
        }
        let last = self.layout.last().and_then(|l| l.fields.last());
        if last.map(|f| (f.value, f.label.as_str())) != Some((FieldValue::Edited, self.edited_label.as_str())) {
            return bad("the last field must be the edited field, labelled `edited_label`".into());
        }
        if self.fields().find(|f| f.value == FieldValue::Keywords).map(|f| &f.label) != Some(&self.keywords_label) {
            return bad("the keywords field must be labelled `keywords_label`".into());
        }
        for label in self.task.labels() {
            match self.label_wording.get(label) {
                Some(w) if w == label_wording(self.task, label)? => {}
                _ => return bad(format!("label wording for `{label}` must be `{}`", label_wording(self.task, label)?)),
            }
        }
        for (i, d) in self.demonstrations.iter().enumerate() {
            if d.keywords.is_empty() || d.edited.trim().is_empty() {
                return bad(format!("demonstration {i} needs keywords and an edit"));
            }
            label_wording(self.task, &d.label)?;
            label_wording(self.task, &d.target_label)?;
            if d.label == d.target_label {
                return bad(format!("demonstration {i} does not flip its label"));
            }
            if (self.task == Task::Nli) != d.text_b.is_some() {
                return bad(format!("demonstration {i}: text_b presence does not match the task"));
            }
        }
        Ok(())
    }

    fn render_block(&self, v: &Values<'_>, with_keywords: bool, out: &mut Vec<String>) -> Result<(), EditorError> {
        for line in &self.layout {
            let mut parts = Vec::new();
            for f in &line.fields {
                let value = match f.value {
                    FieldValue::TextA => v.text_a.to_string(),
                    FieldValue::TextB => v.text_b.unwrap_or_default().to_string(),
                    FieldValue::Label => label_wording(self.task, v.label)?.to_string(),
                    FieldValue::TargetLabel => label_wording(self.task, v.target_label)?.to_string(),
                    FieldValue::Keywords if !with_keywords => continue,
                    FieldValue::Keywords => render_keywords(v.keywords),
                    FieldValue::Edited => match v.edited {
                        Some(e) => e.to_string(),
                        None => {
                            parts.push(f.label.clone());
                            continue;
                        }
                    },
                };
                parts.push(format!("{} {}", f.label, value));
            }
            if !parts.is_empty() {
                out.push(parts.join(" "));
            }
        }
        Ok(())
    }

    fn render(
        &self,
        instance: &LabeledExample,
        keywords: &[String],
        target_label: &str,
        with_keywords: bool,
    ) -> Result<String, EditorError> {
        label_wording(self.task, &instance.label)?;
        label_wording(self.task, target_label)?;
        if instance.label == target_label {
            return Err(EditorError::SameLabel(target_label.to_string()));
        }
        if self.task == Task::Nli && instance.text_b.is_none() {
            return Err(EditorError::MissingField {
                id: instance.id.clone(),
                field: "text_b",
            });
        }
        let mut lines = vec![if with_keywords {
            self.instructions.clone()
        } else {
            self.instructions_without_keywords.clone()
        }];
        for d in &self.demonstrations {
            let v = Values {
                text_a: &d.text_a,
                text_b: d.text_b.as_deref(),
                label: &d.label,
                target_label: &d.target_label,
                keywords: &d.keywords,
                edited: Some(&d.edited),
            };
            self.render_block(&v, with_keywords, &mut lines)?;
        }
        let v = Values {
            text_a: &instance.text_a,
            text_b: instance.text_b.as_deref(),
            label: &instance.label,
            target_label,
            keywords,
            edited: None,
        };
        self.render_block(&v, with_keywords, &mut lines)?;
        Ok(lines.join("\n"))
    }

    /// The full prompt: instructions, every demonstration, then the test
    /// instance ending at the edited-field label for the model to complete.
    pub fn build_prompt(&self, instance: &LabeledExample, keywords: &[String], target_label: &str) -> Result<String, EditorError> {
        if keywords.is_empty() {
            return Err(EditorError::NoKeywords);
        }
        self.render(instance, keywords, target_label, true)
    }

    /// The prompt without any keyword lists, for instances with no usable
    /// retrieved words.
    pub fn build_prompt_without_keywords(&self, instance: &LabeledExample, target_label: &str) -> Result<String, EditorError> {
        self.render(instance, &[], target_label, false)
    }

    /// Extracts the edit from a completion. Anything up to and including the
    /// last edited-field label is dropped, then whitespace is trimmed.
    pub fn parse_edit(&self, raw: &str, original: &str) -> Result<String, EditFailure> {
        let tail = match raw.rfind(&self.edited_label) {
            Some(i) => &raw[i + self.edited_label.len()..],
            None => raw,
        };
        let edit = tail.trim();
        if edit.is_empty() {
            Err(EditFailure::Empty)
        } else if edit == original.trim() {
            Err(EditFailure::Unchanged)
        } else {
            Ok(edit.to_string())
        }
    }
}
