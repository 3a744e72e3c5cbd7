use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::cfdpr::TrainConfig;
use crate::dataset::Task;
use crate::editor::EditParams;
use crate::embedder::EmbeddingBackendConfig;
use crate::extraction::DEFAULT_MAX_KEYWORDS;
use crate::index::{IndexKind, IvfParams};
use crate::reranker::BceConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Input locations. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub examples: PathBuf,
    pub corpus: Vec<PathBuf>,
    pub seed_pairs: PathBuf,
    #[serde(default)]
    pub paraphrases: Option<PathBuf>,
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    pub kind: IndexKind,
    #[serde(flatten)]
    pub ivf: IvfParams,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            kind: IndexKind::Ivf,
            ivf: IvfParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub top_k: usize,
    pub annotation_top_k: usize,
    /// Unset means on for nli, off for sentiment.
    pub rerank: Option<bool>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            annotation_top_k: 3,
            rerank: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditorBackendKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditorConfig {
    pub backend: EditorBackendKind,
    pub endpoint: Option<String>,
    pub auth_env_var: Option<String>,
    pub requests_per_minute: u32,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    /// Prompt template file; the shipped template for the task when unset.
    pub template: Option<PathBuf>,
    #[serde(flatten)]
    pub params: EditParams,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            backend: EditorBackendKind::Mock,
            endpoint: None,
            auth_env_var: None,
            requests_per_minute: 60,
            max_in_flight: 2,
            max_attempts: 5,
            template: None,
            params: EditParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub max_keywords: usize,
    pub min_hits: usize,
    pub max_sentences: usize,
    pub positive_words: Option<PathBuf>,
    pub negative_words: Option<PathBuf>,
    pub determiners: Option<PathBuf>,
    pub conjunctions: Option<PathBuf>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            max_keywords: DEFAULT_MAX_KEYWORDS,
            min_hits: 1,
            max_sentences: 4,
            positive_words: None,
            negative_words: None,
            determiners: None,
            conjunctions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Class whose association the z-statistics measure; the task's first label when unset.
    pub designated_class: Option<String>,
    pub min_count: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            designated_class: None,
            min_count: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub claim_timeout_secs: u64,
    /// Directory of the built UI bundle served under `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            claim_timeout_secs: 30 * 60,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub subset_ids: Option<Vec<String>>,
    pub paths: PathsConfig,
    pub embedding: EmbeddingBackendConfig,
    #[serde(default)]
    pub index: IndexConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub reranker: BceConfig,
    #[serde(default)]
    pub editor: EditorConfig,
    #[serde(default)]
    pub extraction: ExtractionConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub annotation: AnnotationConfig,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.retrieval.top_k == 0 || self.retrieval.annotation_top_k == 0 {
            return bad("top_k and annotation_top_k must be at least 1".into());
        }
        if self.paths.corpus.is_empty() {
            return bad("paths.corpus lists no files".into());
        }
        if self.extraction.max_keywords == 0 || self.extraction.max_sentences == 0 {
            return bad("max_keywords and max_sentences must be at least 1".into());
        }
        if self.editor.max_in_flight == 0 {
            return bad("editor.max_in_flight must be at least 1".into());
        }
        if self.editor.backend == EditorBackendKind::Remote && self.editor.endpoint.is_none() {
            return bad("remote editor requires editor.endpoint".into());
        }
        if let Some(c) = &self.metrics.designated_class {
            if !self.task.is_valid_label(c) {
                return bad(format!("designated_class `{c}` is not a {} label", self.task));
            }
        }
        self.embedding.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.training.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.editor.params.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn rerank_enabled(&self) -> bool {
        self.retrieval.rerank.unwrap_or(self.task == Task::Nli)
    }

    pub fn designated_class(&self) -> &str {
        self.metrics.designated_class.as_deref().unwrap_or(self.task.labels()[0])
    }
}

/// A parsed config plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub root: PathBuf,
    /// sha256 of the config file bytes.
    pub hash: String,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let text = std::str::from_utf8(&bytes).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let config = PipelineConfig::parse(text)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            config,
            root,
            hash: hex::encode(Sha256::digest(&bytes)),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn work_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.work_dir)
    }
}
