//! End-to-end orchestration: ingest, embed, train the retriever, index the
//! corpus, retrieve, edit and evaluate. Each stage reads its inputs from the
//! work directory, fails with the name of the missing upstream command when
//! an artifact is absent, and writes its outputs atomically next to a
//! `<file>.provenance.json` sidecar.

mod config;
mod generate;
mod stages;

pub use config::{
    AnnotationConfig, EditorBackendKind, EditorConfig, ExtractionConfig, IndexConfig, LoadedConfig, MetricsConfig,
    PathsConfig, PipelineConfig, RetrievalConfig, CONFIG_VERSION,
};
pub use generate::{
    annotation_pool, generate, generate_retrieved_only, retrieve, FailureRecord, GenerateSummary, RetrievalRecord, RetrievedDoc,
    Retriever,
};
pub use stages::{build_index, embed, evaluate, ingest, train_reranker, train_retriever, Evaluation, IngestSummary};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cfdpr::TextEmbeddings;
use crate::dataset::{build_query_text, LabeledExample, Task};
use crate::embedder::{EmbeddingCache, EmbeddingMatrix};
use crate::extraction::{select_polarity_sentences, PolarityLexicon};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing {}: run `{command}` first", artifact.display())]
    MissingArtifact { artifact: PathBuf, command: &'static str },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("subset id `{0}` is not in the dataset")]
    UnknownSubsetId(String),
    #[error("no examples to process")]
    NoExamples,
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Embed(#[from] crate::embedder::EmbedError),
    #[error(transparent)]
    Retriever(#[from] crate::cfdpr::RetrieverError),
    #[error(transparent)]
    Index(#[from] crate::index::IndexError),
    #[error(transparent)]
    Rerank(#[from] crate::reranker::RerankError),
    #[error(transparent)]
    Editor(#[from] crate::editor::EditorError),
    #[error(transparent)]
    Extraction(#[from] crate::extraction::ExtractionError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Http(#[from] crate::http::HttpError),
    #[error(transparent)]
    Annotation(#[from] crate::annotation::AnnotationError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Options that change how a command runs but not what it produces.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; rayon's default when unset.
    pub threads: Option<usize>,
    /// Overrides the command's default output file.
    pub out: Option<PathBuf>,
    /// Restricts example-level commands to these ids, replacing `subset_ids`.
    pub subset: Option<Vec<String>>,
    /// Overrides the command's default input file (`evaluate`).
    pub input: Option<PathBuf>,
    /// Extra records whose stage summaries join the report (`evaluate`).
    pub baseline: Option<PathBuf>,
}

impl RunOptions {
    pub(crate) fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
        match self.threads {
            None => Ok(f()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
                Ok(pool.install(f))
            }
        }
    }
}

/// Artifact file names inside the work directory, each with the command that
/// produces it.
pub mod artifacts {
    pub const EXAMPLES: (&str, &str) = ("examples.jsonl", "ingest");
    pub const CORPUS: (&str, &str) = ("corpus.jsonl", "ingest");
    pub const TRIPLETS: (&str, &str) = ("triplets.jsonl", "ingest");
    pub const EMBEDDINGS: (&str, &str) = ("embeddings.cache", "embed");
    pub const QUERY_ENCODER: (&str, &str) = ("query_encoder.bin", "train-retriever");
    pub const DOC_ENCODER: (&str, &str) = ("doc_encoder.bin", "train-retriever");
    pub const TRAIN_LOG: (&str, &str) = ("train_log.jsonl", "train-retriever");
    pub const INDEX: (&str, &str) = ("index.cfix", "build-index");
    pub const RETRIEVALS: (&str, &str) = ("retrievals.jsonl", "retrieve");
    pub const SCORER: (&str, &str) = ("scorer.json", "train-reranker");
    pub const RECORDS: (&str, &str) = ("records.jsonl", "generate");
    pub const FAILURES: (&str, &str) = ("failures.jsonl", "generate");
    pub const REPORT_JSON: (&str, &str) = ("report.json", "evaluate");
    pub const REPORT_TEXT: (&str, &str) = ("report.txt", "evaluate");
    pub const BIAS_CSV: (&str, &str) = ("bias.csv", "evaluate");
    pub const ANNOTATION_POOL: (&str, &str) = ("annotation_pool.jsonl", "serve-annotate");
    pub const JOURNAL: (&str, &str) = ("submissions.jsonl", "serve-annotate");
}

/// Where a stage's inputs and outputs live.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub loaded: LoadedConfig,
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(loaded: LoadedConfig) -> Self {
        let dir = loaded.work_dir();
        Self { loaded, dir }
    }

    pub fn load(config_path: &Path) -> Result<Self, PipelineError> {
        Ok(Self::new(LoadedConfig::load(config_path)?))
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.loaded.config
    }

    pub fn path(&self, artifact: (&str, &str)) -> PathBuf {
        self.dir.join(artifact.0)
    }

    /// The artifact's path, or an error naming the command that makes it.
    pub fn require(&self, artifact: (&str, &'static str)) -> Result<PathBuf, PipelineError> {
        let p = self.path(artifact);
        if p.is_file() {
            Ok(p)
        } else {
            Err(PipelineError::MissingArtifact {
                artifact: p,
                command: artifact.1,
            })
        }
    }

    pub fn ensure_dir(&self) -> Result<(), PipelineError> {
        std::fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))
    }

    /// Master seed mixed into a stage-specific seed.
    pub fn seed(&self, stage_seed: u64) -> u64 {
        stage_seed.wrapping_add(self.config().seed)
    }

    /// Example ids to process: the run override, then the config list.
    pub fn subset(&self, opts: &RunOptions) -> Option<Vec<String>> {
        opts.subset.clone().or_else(|| self.config().subset_ids.clone())
    }

    pub fn provenance(&self, command: &str) -> Provenance {
        Provenance {
            command: command.to_string(),
            config_hash: self.loaded.hash.clone(),
            seed: self.config().seed,
            inputs: BTreeMap::new(),
            backends: BTreeMap::new(),
        }
    }
}

/// Keeps the examples named in `subset`, in dataset order.
pub fn apply_subset(examples: Vec<LabeledExample>, subset: Option<&[String]>) -> Result<Vec<LabeledExample>, PipelineError> {
    let Some(ids) = subset else {
        return Ok(examples);
    };
    let known: std::collections::HashSet<&str> = examples.iter().map(|e| e.id.as_str()).collect();
    if let Some(missing) = ids.iter().find(|id| !known.contains(id.as_str())) {
        return Err(PipelineError::UnknownSubsetId(missing.clone()));
    }
    let wanted: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
    Ok(examples.into_iter().filter(|e| wanted.contains(e.id.as_str())).collect())
}

/// Reads an id list: one id per line, blank lines and `#` comments skipped.
pub fn read_id_list(path: &Path) -> Result<Vec<String>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Hashes and command context written beside every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Input name to sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Backend role to backend id.
    pub backends: BTreeMap<String, String>,
}

impl Provenance {
    pub fn input(&mut self, name: impl Into<String>, path: &Path) -> Result<&mut Self, PipelineError> {
        self.inputs.insert(name.into(), sha256_file(path)?);
        Ok(self)
    }

    pub fn backend(&mut self, role: &str, id: impl Into<String>) -> &mut Self {
        self.backends.insert(role.to_string(), id.into());
        self
    }

    pub fn sidecar_path(output: &Path) -> PathBuf {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".provenance.json");
        output.with_file_name(name)
    }

    pub fn write_for(&self, output: &Path) -> Result<(), PipelineError> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("provenance serializes");
        bytes.push(b'\n');
        write_atomic(&Self::sidecar_path(output), &bytes)
    }

    pub fn read_for(output: &Path) -> Result<Self, PipelineError> {
        let p = Self::sidecar_path(output);
        let bytes = std::fs::read(&p).map_err(io_err(&p))?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let mut f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).map_err(io_err(path))?;
    Ok(hex::encode(h.finalize()))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// The retrieval queries for one example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryPlan {
    /// Texts searched independently; results are merged.
    pub queries: Vec<String>,
    /// Single text standing for the example when scoring pairs.
    pub combined: String,
}

/// NLI examples are queried with `premise [SEP] hypothesis`; reviews with
/// their polarity-bearing sentences, and not at all when none qualify.
pub fn query_plan(ex: &LabeledExample, lexicon: &PolarityLexicon, extraction: &ExtractionConfig) -> Result<QueryPlan, PipelineError> {
    let queries = match ex.task {
        Task::Nli => vec![build_query_text(ex)?],
        Task::Sentiment => {
            select_polarity_sentences(&ex.text_a, lexicon, extraction.min_hits, extraction.max_sentences)
        }
    };
    let combined = queries.join(" ");
    Ok(QueryPlan { queries, combined })
}

pub(crate) fn load_lexicon(ws: &Workspace) -> Result<PolarityLexicon, PipelineError> {
    let e = &ws.config().extraction;
    Ok(match (&e.positive_words, &e.negative_words) {
        (Some(p), Some(n)) => PolarityLexicon::from_files(&ws.loaded.resolve(p), &ws.loaded.resolve(n))?,
        (None, None) => PolarityLexicon::builtin(),
        _ => return Err(PipelineError::Config("set both positive_words and negative_words, or neither".into())),
    })
}

/// Read-only view of the embedding cache for one backend.
pub struct CachedEmbeddings {
    cache: EmbeddingCache,
    backend_id: String,
    path: PathBuf,
}

impl CachedEmbeddings {
    pub fn open(ws: &Workspace) -> Result<Self, PipelineError> {
        let path = ws.require(artifacts::EMBEDDINGS)?;
        let cfg = &ws.config().embedding;
        Ok(Self {
            cache: EmbeddingCache::open(&path, cfg.dimension)?,
            backend_id: cfg.backend_id(),
            path,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, text: &str) -> Result<&[f64], PipelineError> {
        self.cache
            .get(&EmbeddingCache::key(&self.backend_id, text))
            .ok_or_else(|| PipelineError::MissingArtifact {
                artifact: self.path.clone(),
                command: artifacts::EMBEDDINGS.1,
            })
    }

    pub fn matrix(&self, texts: &[String]) -> Result<EmbeddingMatrix, PipelineError> {
        let d = self.cache.dimension();
        let mut values = Array2::zeros((texts.len(), d));
        for (i, t) in texts.iter().enumerate() {
            values.row_mut(i).assign(&ndarray::ArrayView1::from(self.get(t)?));
        }
        Ok(EmbeddingMatrix::new(values)?)
    }

    pub fn table(&self, texts: &[String]) -> Result<TextEmbeddings, PipelineError> {
        Ok(TextEmbeddings::new(texts, self.matrix(texts)?)?)
    }
}
