use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stages::{read_corpus, read_examples};
use super::{
    apply_subset, artifacts, io_err, load_lexicon, query_plan, CachedEmbeddings, EditorBackendKind, PipelineError,
    Provenance, QueryPlan, RunOptions, Workspace,
};
use crate::annotation::{build_pool, AnnotationTask, MAX_EXCERPTS};
use crate::cfdpr::{load_encoder, ProjectionEncoder};
use crate::dataset::{CounterfactualRecord, LabeledExample, RecordMetrics, Stage};
use crate::editor::{label_wording, request_edit, EditRequest, LlmBackend, MockLlm, PromptTemplate, RemoteLlm};
use crate::extraction::{extract_keywords, PolarityLexicon, StopLists};
use crate::http::{ReqwestTransport, RetryPolicy};
use crate::index::{load_index, VectorIndex};
use crate::metrics::{classify_perturbation, norm_levenshtein, self_bleu};
use crate::reranker::{rerank, Candidate, LogisticScorer, PairScorer};

/// Examples processed between flushes of the partial output file.
const FLUSH_EVERY: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDoc {
    pub doc_id: String,
    pub text: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub source_id: String,
    pub queries: Vec<String>,
    pub hits: Vec<RetrievedDoc>,
}

/// An example that produced no record, and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub source_id: String,
    pub stage: Stage,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub output: PathBuf,
    pub records: usize,
    pub failures: usize,
    pub by_stage: BTreeMap<Stage, usize>,
}

/// Everything needed to answer a query against the indexed corpus.
pub struct Retriever {
    query_encoder: ProjectionEncoder,
    index: VectorIndex,
    texts: HashMap<String, String>,
    embeddings: CachedEmbeddings,
    scorer: Option<LogisticScorer>,
    lexicon: PolarityLexicon,
    extraction: super::ExtractionConfig,
    inputs: Vec<(&'static str, PathBuf)>,
}

impl Retriever {
    /// Loads the query encoder, index, corpus and embedding cache; the pair
    /// scorer too when `rerank` is set.
    pub fn open(ws: &Workspace, rerank: bool) -> Result<Self, PipelineError> {
        let index_path = ws.require(artifacts::INDEX)?;
        let enc_path = ws.require(artifacts::QUERY_ENCODER)?;
        let embeddings = CachedEmbeddings::open(ws)?;
        let query_encoder = load_encoder(&enc_path)?;
        let index = load_index(&index_path)?;
        if index.dimension() != query_encoder.output_dim() {
            return Err(PipelineError::Config(format!(
                "index dimension {} does not match the query encoder ({}); rerun `build-index`",
                index.dimension(),
                query_encoder.output_dim()
            )));
        }
        let texts = read_corpus(ws)?.into_iter().map(|d| (d.doc_id, d.text)).collect();
        let mut inputs = vec![
            (artifacts::CORPUS.0, ws.path(artifacts::CORPUS)),
            (artifacts::EMBEDDINGS.0, embeddings.path().to_path_buf()),
            (artifacts::QUERY_ENCODER.0, enc_path),
            (artifacts::INDEX.0, index_path),
        ];
        let scorer = if rerank {
            let p = ws.require(artifacts::SCORER)?;
            let s = LogisticScorer::load(&p)?;
            inputs.push((artifacts::SCORER.0, p));
            Some(s)
        } else {
            None
        };
        Ok(Self {
            query_encoder,
            index,
            texts,
            embeddings,
            scorer,
            lexicon: load_lexicon(ws)?,
            extraction: ws.config().extraction.clone(),
            inputs,
        })
    }

    pub fn plan(&self, ex: &LabeledExample) -> Result<QueryPlan, PipelineError> {
        query_plan(ex, &self.lexicon, &self.extraction)
    }

    /// Top `k` documents over all of the plan's queries. Each query is
    /// searched separately; a document keeps its best score. Ordering is by
    /// score then doc id, followed by the pair scorer's order when present.
    pub fn retrieve(&self, plan: &QueryPlan, k: usize) -> Result<Vec<RetrievedDoc>, PipelineError> {
        let mut best: HashMap<String, f64> = HashMap::new();
        for q in &plan.queries {
            let base = self.embeddings.get(q)?;
            let projected = self.query_encoder.project(ArrayView1::from(base))?;
            for hit in self.index.search(projected.view(), k)? {
                let e = best.entry(hit.doc_id).or_insert(f64::NEG_INFINITY);
                *e = e.max(hit.score);
            }
        }
        let mut merged: Vec<(String, f64)> = best.into_iter().collect();
        merged.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        merged.truncate(k);
        let mut docs: Vec<RetrievedDoc> = merged
            .into_iter()
            .map(|(doc_id, score)| {
                let text = self.texts.get(&doc_id).cloned().ok_or_else(|| {
                    PipelineError::Config(format!("index references `{doc_id}`, which is not in the corpus; rerun `build-index`"))
                })?;
                Ok(RetrievedDoc {
                    doc_id,
                    text,
                    score,
                    rerank_probability: None,
                })
            })
            .collect::<Result<_, PipelineError>>()?;
        if let (Some(scorer), false) = (&self.scorer, docs.is_empty()) {
            let qv = ArrayView1::from(self.embeddings.get(&plan.combined)?);
            let doc_vecs: Vec<&[f64]> = docs.iter().map(|d| self.embeddings.get(&d.text)).collect::<Result<_, _>>()?;
            let cands: Vec<Candidate<'_>> = docs
                .iter()
                .zip(&doc_vecs)
                .map(|(d, v)| Candidate {
                    text: &d.text,
                    vector: ArrayView1::from(*v),
                })
                .collect();
            let probs = scorer.probabilities(
                Candidate {
                    text: &plan.combined,
                    vector: qv,
                },
                &cands,
            )?;
            docs = rerank(docs, &probs)
                .into_iter()
                .map(|(mut d, p)| {
                    d.rerank_probability = Some(p);
                    d
                })
                .collect();
        }
        Ok(docs)
    }

    fn record_inputs(&self, prov: &mut Provenance) -> Result<(), PipelineError> {
        for (name, path) in &self.inputs {
            prov.input(*name, path)?;
        }
        Ok(())
    }
}

fn selected_examples(ws: &Workspace, opts: &RunOptions) -> Result<Vec<LabeledExample>, PipelineError> {
    let examples = apply_subset(read_examples(ws)?, ws.subset(opts).as_deref())?;
    if examples.is_empty() {
        return Err(PipelineError::NoExamples);
    }
    Ok(examples)
}

/// Writes each example's retrieval results to `retrievals.jsonl`.
pub fn retrieve(ws: &Workspace, opts: &RunOptions) -> Result<PathBuf, PipelineError> {
    let cfg = ws.config();
    let examples = selected_examples(ws, opts)?;
    let retriever = Retriever::open(ws, cfg.rerank_enabled())?;
    let rows: Vec<RetrievalRecord> = opts.install(|| {
        examples
            .par_iter()
            .map(|ex| {
                let plan = retriever.plan(ex)?;
                let hits = retriever.retrieve(&plan, cfg.retrieval.top_k)?;
                Ok(RetrievalRecord {
                    source_id: ex.id.clone(),
                    queries: plan.queries,
                    hits,
                })
            })
            .collect::<Result<_, PipelineError>>()
    })??;
    let out = opts.out.clone().unwrap_or_else(|| ws.path(artifacts::RETRIEVALS));
    crate::dataset::write_jsonl(&out, &rows)?;
    let mut prov = ws.provenance("retrieve");
    prov.input(artifacts::EXAMPLES.0, &ws.path(artifacts::EXAMPLES))?;
    retriever.record_inputs(&mut prov)?;
    prov.write_for(&out)?;
    Ok(out)
}

/// Loads the annotation task pool, building it on first use. Retrieval-condition
/// tasks show the top `annotation_top_k` excerpts.
pub fn annotation_pool(ws: &Workspace, opts: &RunOptions) -> Result<Vec<AnnotationTask>, PipelineError> {
    let path = ws.path(artifacts::ANNOTATION_POOL);
    if path.is_file() {
        return Ok(crate::dataset::read_jsonl_vec(&path)?);
    }
    let cfg = ws.config();
    let examples = selected_examples(ws, opts)?;
    let retriever = Retriever::open(ws, cfg.rerank_enabled())?;
    let k = cfg.retrieval.annotation_top_k.min(MAX_EXCERPTS);
    let pool = build_pool(&examples, |ex| -> Result<Vec<String>, PipelineError> {
        let plan = retriever.plan(ex)?;
        Ok(retriever.retrieve(&plan, k)?.into_iter().map(|d| d.text).collect())
    })?;
    ws.ensure_dir()?;
    crate::dataset::write_jsonl(&path, &pool)?;
    let mut prov = ws.provenance("serve-annotate");
    prov.input(artifacts::EXAMPLES.0, &ws.path(artifacts::EXAMPLES))?;
    retriever.record_inputs(&mut prov)?;
    prov.write_for(&path)?;
    Ok(pool)
}

fn build_backend(ws: &Workspace) -> Result<Box<dyn LlmBackend>, PipelineError> {
    let e = &ws.config().editor;
    Ok(match e.backend {
        EditorBackendKind::Mock => Box::new(MockLlm),
        EditorBackendKind::Remote => {
            let endpoint = e.endpoint.clone().ok_or_else(|| PipelineError::Config("editor.endpoint unset".into()))?;
            let retry = RetryPolicy {
                max_attempts: e.max_attempts,
                ..RetryPolicy::default()
            };
            Box::new(RemoteLlm::new(
                endpoint,
                Box::new(ReqwestTransport::new(Duration::from_secs(120))?),
                retry,
                e.auth_env_var.clone(),
                e.requests_per_minute,
            ))
        }
    })
}

fn load_template(ws: &Workspace) -> Result<PromptTemplate, PipelineError> {
    let cfg = ws.config();
    let t = match &cfg.editor.template {
        Some(p) => PromptTemplate::from_file(&ws.loaded.resolve(p))?,
        None => PromptTemplate::builtin(cfg.task),
    };
    if t.task != cfg.task {
        return Err(PipelineError::Config(format!("template is for `{}`, config task is `{}`", t.task, cfg.task)));
    }
    Ok(t)
}

fn load_stops(ws: &Workspace) -> Result<StopLists, PipelineError> {
    let e = &ws.config().extraction;
    Ok(match (&e.determiners, &e.conjunctions) {
        (Some(d), Some(c)) => StopLists::from_files(&ws.loaded.resolve(d), &ws.loaded.resolve(c))?,
        (None, None) => StopLists::default(),
        _ => return Err(PipelineError::Config("set both determiners and conjunctions, or neither".into())),
    })
}

fn record_metrics(original: &str, edited: &str) -> RecordMetrics {
    RecordMetrics {
        self_bleu: self_bleu(original, edited),
        levenshtein: norm_levenshtein(original, edited),
        perturbation_type: classify_perturbation(original, edited),
    }
}

enum Outcome {
    Record(Box<CounterfactualRecord>),
    Failure(FailureRecord),
}

/// Appends records to `<out>.partial` as they complete, then renames it.
struct PartialWriter {
    partial: PathBuf,
    out: PathBuf,
    writer: BufWriter<File>,
}

impl PartialWriter {
    fn create(out: &Path) -> Result<Self, PipelineError> {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".partial");
        let partial = out.with_file_name(name);
        if let Some(dir) = partial.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = File::create(&partial).map_err(io_err(&partial))?;
        Ok(Self {
            writer: BufWriter::new(file),
            partial,
            out: out.to_path_buf(),
        })
    }

    fn append(&mut self, records: &[CounterfactualRecord]) -> Result<(), PipelineError> {
        for r in records {
            r.validate()?;
            serde_json::to_writer(&mut self.writer, r).map_err(|e| io_err(&self.partial)(e.into()))?;
            self.writer.write_all(b"\n").map_err(io_err(&self.partial))?;
        }
        self.writer.flush().map_err(io_err(&self.partial))
    }

    fn finish(self) -> Result<(), PipelineError> {
        let file = self.writer.into_inner().map_err(|e| io_err(&self.partial)(e.into_error()))?;
        file.sync_all().map_err(io_err(&self.partial))?;
        std::fs::rename(&self.partial, &self.out).map_err(io_err(&self.out))
    }
}

fn failures_path(out: &Path, default_out: &Path, ws: &Workspace) -> PathBuf {
    if out == default_out {
        ws.path(artifacts::FAILURES)
    } else {
        let stem = out.file_stem().unwrap_or_default().to_string_lossy();
        out.with_file_name(format!("{stem}.failures.jsonl"))
    }
}

/// Runs chunks of examples in parallel, keeping input order in the output.
fn run_ordered(
    ws: &Workspace,
    opts: &RunOptions,
    examples: &[LabeledExample],
    out: &Path,
    default_out: &Path,
    threads_cap: Option<usize>,
    one: impl Fn(&LabeledExample) -> Result<Outcome, PipelineError> + Sync,
) -> Result<GenerateSummary, PipelineError> {
    let opts = RunOptions {
        threads: match (opts.threads, threads_cap) {
            (Some(t), Some(c)) => Some(t.min(c)),
            (t, c) => t.or(c),
        },
        ..opts.clone()
    };
    let mut writer = PartialWriter::create(out)?;
    let mut failures = Vec::new();
    let mut by_stage: BTreeMap<Stage, usize> = BTreeMap::new();
    let mut count = 0;
    for chunk in examples.chunks(FLUSH_EVERY) {
        let outcomes: Vec<Outcome> = opts.install(|| chunk.par_iter().map(&one).collect::<Result<_, _>>())??;
        let mut records = Vec::new();
        for o in outcomes {
            match o {
                Outcome::Record(r) => {
                    *by_stage.entry(r.stage).or_default() += 1;
                    records.push(*r);
                }
                Outcome::Failure(f) => {
                    log::warn!("{}: {}", f.source_id, f.reason);
                    failures.push(f);
                }
            }
        }
        count += records.len();
        writer.append(&records)?;
    }
    writer.finish()?;
    let fail_path = failures_path(out, default_out, ws);
    crate::dataset::write_jsonl(&fail_path, &failures)?;
    if !failures.is_empty() {
        log::warn!("{} of {} examples failed; see {}", failures.len(), examples.len(), fail_path.display());
    }
    Ok(GenerateSummary {
        output: out.to_path_buf(),
        records: count,
        failures: failures.len(),
        by_stage,
    })
}

/// Retrieve, extract keywords, prompt the editor and parse its edit, for
/// every selected example. Individual edit failures are collected in the
/// failures file; only infrastructure errors abort the run.
pub fn generate(ws: &Workspace, opts: &RunOptions) -> Result<GenerateSummary, PipelineError> {
    let cfg = ws.config();
    let examples = selected_examples(ws, opts)?;
    let retriever = Retriever::open(ws, cfg.rerank_enabled())?;
    let template = load_template(ws)?;
    let stops = load_stops(ws)?;
    let backend = build_backend(ws)?;
    let params = cfg.editor.params.clone();
    let task = cfg.task;

    let one = |ex: &LabeledExample| -> Result<Outcome, PipelineError> {
        let target = task
            .flip_label(&ex.label)
            .ok_or_else(|| PipelineError::Config(format!("example `{}` has a non-binary label", ex.id)))?;
        let original = ex.editable_text();
        let plan = retriever.plan(ex)?;
        let retrieved = if plan.queries.is_empty() {
            Vec::new()
        } else {
            retriever.retrieve(&plan, cfg.retrieval.top_k)?
        };
        let excerpts: Vec<String> = retrieved.iter().map(|d| d.text.clone()).collect();
        let keywords = extract_keywords(&excerpts, &stops, cfg.extraction.max_keywords);
        let (prompt, stage) = if keywords.is_empty() {
            (template.build_prompt_without_keywords(ex, target)?, Stage::GptOnly)
        } else {
            (template.build_prompt(ex, &keywords, target)?, Stage::Core)
        };
        let request = EditRequest {
            prompt,
            original: original.to_string(),
            keywords: keywords.clone(),
            target_wording: label_wording(task, target)?.to_string(),
        };
        let fail = |reason: String| {
            Ok(Outcome::Failure(FailureRecord {
                source_id: ex.id.clone(),
                stage,
                reason,
            }))
        };
        let raw = match request_edit(&request, &params, backend.as_ref()) {
            Ok(raw) => raw,
            Err(e) => return fail(format!("editor: {e}")),
        };
        let edited = match template.parse_edit(&raw, original) {
            Ok(e) => e,
            Err(f) => return fail(format!("unusable completion: {f}")),
        };
        Ok(Outcome::Record(Box::new(CounterfactualRecord {
            source_id: ex.id.clone(),
            metrics: Some(record_metrics(original, &edited)),
            original_text: original.to_string(),
            edited_text: edited,
            original_label: ex.label.clone(),
            target_label: target.to_string(),
            keywords,
            retrieved_doc_ids: retrieved.into_iter().map(|d| d.doc_id).collect(),
            stage,
        })))
    };

    let default_out = ws.path(artifacts::RECORDS);
    let out = opts.out.clone().unwrap_or_else(|| default_out.clone());
    let cap = (cfg.editor.backend == EditorBackendKind::Remote).then_some(cfg.editor.max_in_flight);
    let summary = run_ordered(ws, opts, &examples, &out, &default_out, cap, one)?;

    let mut prov = ws.provenance("generate");
    prov.input(artifacts::EXAMPLES.0, &ws.path(artifacts::EXAMPLES))?;
    retriever.record_inputs(&mut prov)?;
    prov.backend("embedding", cfg.embedding.backend_id());
    prov.backend("editor", backend.id());
    prov.backend("reranker", if cfg.rerank_enabled() { "logistic" } else { "none" });
    prov.write_for(&out)?;
    Ok(summary)
}

/// Baseline that takes the top retrieved excerpt itself as the edit.
pub fn generate_retrieved_only(ws: &Workspace, opts: &RunOptions) -> Result<GenerateSummary, PipelineError> {
    let cfg = ws.config();
    let examples = selected_examples(ws, opts)?;
    let retriever = Retriever::open(ws, cfg.rerank_enabled())?;
    let task = cfg.task;

    let one = |ex: &LabeledExample| -> Result<Outcome, PipelineError> {
        let target = task
            .flip_label(&ex.label)
            .ok_or_else(|| PipelineError::Config(format!("example `{}` has a non-binary label", ex.id)))?;
        let original = ex.editable_text();
        let fail = |reason: &str| {
            Ok(Outcome::Failure(FailureRecord {
                source_id: ex.id.clone(),
                stage: Stage::RetrievedOnly,
                reason: reason.into(),
            }))
        };
        let plan = retriever.plan(ex)?;
        if plan.queries.is_empty() {
            return fail("no polarity sentences to query with");
        }
        let Some(top) = retriever.retrieve(&plan, cfg.retrieval.top_k)?.into_iter().next() else {
            return fail("retrieval returned nothing");
        };
        if top.text.trim() == original.trim() {
            return fail("top excerpt equals the original");
        }
        Ok(Outcome::Record(Box::new(CounterfactualRecord {
            source_id: ex.id.clone(),
            metrics: Some(record_metrics(original, &top.text)),
            original_text: original.to_string(),
            edited_text: top.text,
            original_label: ex.label.clone(),
            target_label: target.to_string(),
            keywords: Vec::new(),
            retrieved_doc_ids: vec![top.doc_id],
            stage: Stage::RetrievedOnly,
        })))
    };

    let default_out = ws.dir.join("retrieved_only.jsonl");
    let out = opts.out.clone().unwrap_or_else(|| default_out.clone());
    let summary = run_ordered(ws, opts, &examples, &out, &ws.path(artifacts::RECORDS), None, one)?;
    let mut prov = ws.provenance("generate");
    prov.input(artifacts::EXAMPLES.0, &ws.path(artifacts::EXAMPLES))?;
    retriever.record_inputs(&mut prov)?;
    prov.backend("embedding", cfg.embedding.backend_id());
    prov.write_for(&out)?;
    Ok(summary)
}
