use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{
    artifacts, io_err, load_lexicon, query_plan, write_atomic, CachedEmbeddings, PipelineError, RunOptions, Workspace,
};
use crate::cfdpr::{load_encoder, sample_eval_pools, save_encoder, train, EpochLog, TrainConfig};
use crate::dataset::{
    build_triplets, load_corpus, load_examples, load_records, read_jsonl_vec, write_jsonl, CorpusDocument, LabeledExample,
    Paraphrase, SeedPair, Stage, TripletRecord,
};
use crate::embedder::{build_embedder, EmbeddingCache};
use crate::index::{IndexKind, IvfParams, VectorIndex};
use crate::metrics::{aggregate_report, check_intrinsic_ordering, stage_summary, MetricsReport, PairedCorpus};
use crate::reranker::{train_bce, training_pairs, BceConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub examples: usize,
    pub documents: usize,
    pub triplets: usize,
    pub rejected_pairs: usize,
    pub missing_paraphrases: usize,
}

fn display(p: &std::path::Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Validates the raw inputs and copies them into the work directory as
/// `examples.jsonl`, `corpus.jsonl` and `triplets.jsonl`.
pub fn ingest(ws: &Workspace) -> Result<IngestSummary, PipelineError> {
    let cfg = ws.config();
    ws.ensure_dir()?;
    let mut prov = ws.provenance("ingest");

    let ex_path = ws.loaded.resolve(&cfg.paths.examples);
    let examples = load_examples(&ex_path, cfg.task)?;
    prov.input(display(&cfg.paths.examples), &ex_path)?;

    let mut documents: Vec<CorpusDocument> = Vec::new();
    let mut seen = HashSet::new();
    for rel in &cfg.paths.corpus {
        let path = ws.loaded.resolve(rel);
        for doc in load_corpus(&path)? {
            if !seen.insert(doc.doc_id.clone()) {
                return Err(PipelineError::Config(format!(
                    "doc_id `{}` appears in more than one corpus file",
                    doc.doc_id
                )));
            }
            documents.push(doc);
        }
        prov.input(display(rel), &path)?;
    }

    let seeds_path = ws.loaded.resolve(&cfg.paths.seed_pairs);
    let seeds: Vec<SeedPair> = read_jsonl_vec(&seeds_path)?;
    prov.input(display(&cfg.paths.seed_pairs), &seeds_path)?;
    let mut paraphrases = HashMap::new();
    if let Some(rel) = &cfg.paths.paraphrases {
        let path = ws.loaded.resolve(rel);
        for p in read_jsonl_vec::<Paraphrase>(&path)? {
            paraphrases.insert(p.query, p.paraphrase);
        }
        prov.input(display(rel), &path)?;
    }
    let build = build_triplets(&seeds, &paraphrases)?;
    if build.triplets.is_empty() {
        return Err(PipelineError::Config("no usable seed pairs".into()));
    }

    let outputs = [ws.path(artifacts::EXAMPLES), ws.path(artifacts::CORPUS), ws.path(artifacts::TRIPLETS)];
    write_jsonl(&outputs[0], &examples)?;
    write_jsonl(&outputs[1], &documents)?;
    write_jsonl(&outputs[2], &build.triplets)?;
    for out in &outputs {
        prov.write_for(out)?;
    }
    Ok(IngestSummary {
        examples: examples.len(),
        documents: documents.len(),
        triplets: build.triplets.len(),
        rejected_pairs: build.rejected.len(),
        missing_paraphrases: build.missing_paraphrase.len(),
    })
}

pub(crate) fn read_examples(ws: &Workspace) -> Result<Vec<LabeledExample>, PipelineError> {
    Ok(load_examples(&ws.require(artifacts::EXAMPLES)?, ws.config().task)?)
}

pub(crate) fn read_corpus(ws: &Workspace) -> Result<Vec<CorpusDocument>, PipelineError> {
    Ok(load_corpus(&ws.require(artifacts::CORPUS)?)?)
}

pub(crate) fn read_triplets(ws: &Workspace) -> Result<Vec<TripletRecord>, PipelineError> {
    Ok(read_jsonl_vec(&ws.require(artifacts::TRIPLETS)?)?)
}

fn push_unique(out: &mut Vec<String>, seen: &mut HashSet<String>, text: &str) {
    if !text.trim().is_empty() && seen.insert(text.to_string()) {
        out.push(text.to_string());
    }
}

/// Embeds every text later stages look up: corpus documents, triplet texts
/// and each example's retrieval queries. Returns the number of texts.
pub fn embed(ws: &Workspace, opts: &RunOptions) -> Result<usize, PipelineError> {
    let cfg = ws.config();
    let examples = read_examples(ws)?;
    let corpus = read_corpus(ws)?;
    let triplets = read_triplets(ws)?;
    let lexicon = load_lexicon(ws)?;

    let mut texts = Vec::new();
    let mut seen = HashSet::new();
    for d in &corpus {
        push_unique(&mut texts, &mut seen, &d.text);
    }
    for t in &triplets {
        push_unique(&mut texts, &mut seen, &t.query);
        push_unique(&mut texts, &mut seen, &t.positive);
        for n in &t.hard_negatives {
            push_unique(&mut texts, &mut seen, n);
        }
    }
    for ex in &examples {
        let plan = query_plan(ex, &lexicon, &cfg.extraction)?;
        for q in &plan.queries {
            push_unique(&mut texts, &mut seen, q);
        }
        push_unique(&mut texts, &mut seen, &plan.combined);
    }

    let embedder = build_embedder(&cfg.embedding)?;
    let path = ws.path(artifacts::EMBEDDINGS);
    let mut cache = EmbeddingCache::open(&path, cfg.embedding.dimension)?;
    opts.install(|| cache.embed_with(embedder.as_ref(), &texts))??;
    cache.save()?;

    let mut prov = ws.provenance("embed");
    for a in [artifacts::EXAMPLES, artifacts::CORPUS, artifacts::TRIPLETS] {
        prov.input(a.0, &ws.path(a))?;
    }
    prov.backend("embedding", embedder.backend_id());
    prov.write_for(&path)?;
    Ok(texts.len())
}

/// Trains the projection heads on the seed triplets. When `eval_every` is
/// set, top-1 accuracy is tracked on pools built from the same triplets.
pub fn train_retriever(ws: &Workspace, opts: &RunOptions) -> Result<Vec<EpochLog>, PipelineError> {
    let cfg = ws.config();
    let triplets = read_triplets(ws)?;
    let corpus = read_corpus(ws)?;
    let emb = CachedEmbeddings::open(ws)?;

    let mut texts = Vec::new();
    let mut seen = HashSet::new();
    for t in &triplets {
        push_unique(&mut texts, &mut seen, &t.query);
        push_unique(&mut texts, &mut seen, &t.positive);
        for n in &t.hard_negatives {
            push_unique(&mut texts, &mut seen, n);
        }
    }
    let corpus_texts: Vec<String> = corpus.iter().map(|d| d.text.clone()).collect();
    for t in &corpus_texts {
        push_unique(&mut texts, &mut seen, t);
    }
    let table = emb.table(&texts)?;

    let train_cfg = TrainConfig {
        seed: ws.seed(cfg.training.seed),
        ..cfg.training.clone()
    };
    let pools = if train_cfg.eval_every > 0 {
        Some(sample_eval_pools(&triplets, &corpus_texts, &table, train_cfg.seed)?)
    } else {
        None
    };
    let trained = opts.install(|| train(&triplets, &table, &train_cfg, pools.as_deref()))??;

    let mut prov = ws.provenance("train-retriever");
    prov.input(artifacts::TRIPLETS.0, &ws.path(artifacts::TRIPLETS))?;
    prov.input(artifacts::CORPUS.0, &ws.path(artifacts::CORPUS))?;
    prov.input(artifacts::EMBEDDINGS.0, emb.path())?;
    for (artifact, enc) in [
        (artifacts::QUERY_ENCODER, &trained.encoders.query),
        (artifacts::DOC_ENCODER, &trained.encoders.document),
    ] {
        let out = ws.path(artifact);
        save_encoder(enc, &out)?;
        prov.write_for(&out)?;
    }
    let log_path = ws.path(artifacts::TRAIN_LOG);
    write_jsonl(&log_path, &trained.log)?;
    prov.write_for(&log_path)?;
    if let Some(last) = trained.log.last() {
        log::info!("final epoch {}: loss {:.6}, top-1 {:?}", last.epoch, last.mean_loss, last.eval_top1);
    }
    Ok(trained.log)
}

/// Indexes the corpus projected through the document encoder.
pub fn build_index(ws: &Workspace, opts: &RunOptions) -> Result<VectorIndex, PipelineError> {
    let cfg = ws.config();
    let enc_path = ws.require(artifacts::DOC_ENCODER)?;
    let doc_encoder = load_encoder(&enc_path)?;
    let corpus = read_corpus(ws)?;
    let emb = CachedEmbeddings::open(ws)?;
    let texts: Vec<String> = corpus.iter().map(|d| d.text.clone()).collect();
    let base = emb.matrix(&texts)?;
    let projected = doc_encoder.project_rows(base.values().view())?;
    let ids: Vec<String> = corpus.iter().map(|d| d.doc_id.clone()).collect();
    let index = match cfg.index.kind {
        IndexKind::Exact => VectorIndex::exact(ids, projected)?,
        IndexKind::Ivf => {
            let params = IvfParams {
                kmeans_seed: ws.seed(cfg.index.ivf.kmeans_seed),
                ..cfg.index.ivf
            };
            opts.install(|| VectorIndex::ivf(ids, projected, params))??
        }
    };
    let out = ws.path(artifacts::INDEX);
    crate::index::save_index(&index, &out)?;
    let mut prov = ws.provenance("build-index");
    prov.input(artifacts::CORPUS.0, &ws.path(artifacts::CORPUS))?;
    prov.input(artifacts::DOC_ENCODER.0, &enc_path)?;
    prov.input(artifacts::EMBEDDINGS.0, emb.path())?;
    prov.write_for(&out)?;
    Ok(index)
}

/// Fits the logistic pair scorer on (query, positive) vs (query, paraphrase).
pub fn train_reranker(ws: &Workspace) -> Result<crate::reranker::LogisticScorer, PipelineError> {
    let cfg = ws.config();
    let triplets = read_triplets(ws)?;
    let emb = CachedEmbeddings::open(ws)?;
    let mut texts = Vec::new();
    let mut seen = HashSet::new();
    for t in &triplets {
        push_unique(&mut texts, &mut seen, &t.query);
        push_unique(&mut texts, &mut seen, &t.positive);
        for n in &t.hard_negatives {
            push_unique(&mut texts, &mut seen, n);
        }
    }
    let table = emb.table(&texts)?;
    let pairs = training_pairs(&triplets, &table)?;
    let bce = BceConfig {
        seed: ws.seed(cfg.reranker.seed),
        ..cfg.reranker
    };
    let scorer = train_bce(&pairs, &bce)?;
    let out = ws.path(artifacts::SCORER);
    scorer.save(&out)?;
    let mut prov = ws.provenance("train-reranker");
    prov.input(artifacts::TRIPLETS.0, &ws.path(artifacts::TRIPLETS))?;
    prov.input(artifacts::EMBEDDINGS.0, emb.path())?;
    prov.write_for(&out)?;
    Ok(scorer)
}

/// Report plus the result of the stage-ordering sanity check, when the
/// records cover both the retrieval baseline and full generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub ordering: Option<Result<(), String>>,
}

/// Computes the metric report over a records file (generation output by
/// default) and writes `report.json`, `report.txt` and `bias.csv`.
pub fn evaluate(ws: &Workspace, opts: &RunOptions) -> Result<Evaluation, PipelineError> {
    let cfg = ws.config();
    let input = match &opts.input {
        Some(p) => p.clone(),
        None => ws.require(artifacts::RECORDS)?,
    };
    let records = load_records(&input)?;
    let corpus = PairedCorpus::from_records(&records)?;
    let label_data = corpus.label_data();
    let mut report = opts.install(|| {
        aggregate_report(&corpus, Some((&label_data, cfg.designated_class())), cfg.metrics.min_count)
    })??;
    let mut stages = stage_summary(&records);
    let mut prov = ws.provenance("evaluate");
    prov.input(display(input.file_name().unwrap_or_default().as_ref()), &input)?;
    if let Some(b) = &opts.baseline {
        let extra = load_records(b)?;
        for (stage, s) in stage_summary(&extra) {
            stages.entry(stage).or_insert(s);
        }
        prov.input(display(b.file_name().unwrap_or_default().as_ref()), b)?;
    }
    report.stages = stages;
    let ordering = (report.stages.contains_key(&Stage::RetrievedOnly) && report.stages.contains_key(&Stage::Core))
        .then(|| check_intrinsic_ordering(&report.stages).map_err(|e| e.to_string()));
    if let Some(Err(e)) = &ordering {
        log::warn!("intrinsic ordering check failed: {e}");
    }

    let json_path = match &opts.out {
        Some(p) => p.clone(),
        None => ws.path(artifacts::REPORT_JSON),
    };
    let text_path = json_path.with_file_name(artifacts::REPORT_TEXT.0);
    let csv_path = json_path.with_file_name(artifacts::BIAS_CSV.0);
    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    write_atomic(&json_path, &json)?;
    let mut text = report.to_text_table();
    match &ordering {
        Some(Ok(())) => text.push_str("intrinsic ordering: ok\n"),
        Some(Err(e)) => text.push_str(&format!("intrinsic ordering: VIOLATED ({e})\n")),
        None => {}
    }
    write_atomic(&text_path, text.as_bytes())?;
    let csv = report
        .bias_csv()
        .map_err(|e| io_err(&csv_path)(std::io::Error::other(e.to_string())))?;
    write_atomic(&csv_path, csv.as_bytes())?;
    for p in [&json_path, &text_path, &csv_path] {
        prov.write_for(p)?;
    }
    Ok(Evaluation { report, ordering })
}
