//! Shared fixtures for integration tests.
#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recast::dataset::TripletRecord;

pub const ASPECTS: [&str; 10] = [
    "acting", "plot", "soundtrack", "pacing", "dialogue", "cinematography", "ending", "casting", "humor", "direction",
];
pub const SUBJECTS: [&str; 20] = [
    "heist movie", "war drama", "space opera", "family comedy", "crime thriller", "period piece", "horror sequel",
    "musical", "western", "spy caper", "courtroom drama", "road movie", "sports film", "disaster epic",
    "teen romance", "noir mystery", "animated feature", "biopic", "monster flick", "political satire",
];
pub const POSITIVE: [&str; 6] = ["wonderful", "superb", "brilliant", "delightful", "excellent", "marvelous"];
pub const NEGATIVE: [&str; 6] = ["dreadful", "awful", "terrible", "dismal", "atrocious", "horrible"];
pub const INTENSIFIERS: [&str; 5] = ["", "really ", "truly ", "quite ", "simply "];

fn sentence(aspect: &str, subject: &str, intensifier: &str, polar: &str) -> String {
    format!("the {aspect} in the {subject} was {intensifier}{polar}")
}

/// Synthetic counterfactual retrieval data.
///
/// Each of the 200 topics (aspect x subject) has a query with some polarity,
/// a positive that flips only the polarity word, and a corpus holding every
/// same-polarity wording of the topic (5 intensifiers x 6 synonyms) plus the
/// positive. Nothing in the corpus pairs the topic with the flipped polarity
/// except the positive, so "same topic, opposite polarity" singles it out.
pub struct SyntheticRetrieval {
    pub triplets: Vec<TripletRecord>,
    pub corpus: Vec<String>,
}

pub fn synthetic_retrieval(seed: u64) -> SyntheticRetrieval {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::new();
    let mut corpus = Vec::new();
    for aspect in ASPECTS {
        for subject in SUBJECTS {
            let positive_query = rng.random_bool(0.5);
            let (same, flipped) = if positive_query { (&POSITIVE, &NEGATIVE) } else { (&NEGATIVE, &POSITIVE) };
            let intensifier = *INTENSIFIERS.choose(&mut rng).unwrap();
            let polar = *same.choose(&mut rng).unwrap();
            let query = sentence(aspect, subject, intensifier, polar);
            let positive = sentence(aspect, subject, intensifier, flipped.choose(&mut rng).unwrap());
            let paraphrase = loop {
                let p = sentence(aspect, subject, INTENSIFIERS.choose(&mut rng).unwrap(), same.choose(&mut rng).unwrap());
                if p != query {
                    break p;
                }
            };
            for i in INTENSIFIERS {
                for w in same.iter() {
                    corpus.push(sentence(aspect, subject, i, w));
                }
            }
            corpus.push(positive.clone());
            triplets.push(TripletRecord {
                query: query.clone(),
                positive,
                hard_negatives: vec![paraphrase, query],
            });
        }
    }
    SyntheticRetrieval { triplets, corpus }
}

pub fn fixture_dir(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Copies a fixture's input files (not its work directory) into a fresh
/// temporary directory.
pub fn copy_fixture(name: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(fixture_dir(name)).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            std::fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
        }
    }
    dir
}

/// Runs every stage up to and including `generate`.
pub fn run_pipeline(
    ws: &recast::pipeline::Workspace,
    opts: &recast::pipeline::RunOptions,
) -> recast::pipeline::GenerateSummary {
    use recast::pipeline::*;
    ingest(ws).unwrap();
    embed(ws, opts).unwrap();
    train_retriever(ws, opts).unwrap();
    build_index(ws, opts).unwrap();
    if ws.config().rerank_enabled() {
        train_reranker(ws).unwrap();
    }
    generate(ws, opts).unwrap()
}

/// Raw base vectors of one triplet for the gradient oracle.
pub struct RawTriplet {
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

fn project(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let d_out = w[0].len();
    (0..d_out).map(|j| x.iter().zip(w).map(|(xi, row)| xi * row[j]).sum()).collect()
}

/// Mean batch loss computed independently: explicit row-major projection and
/// the public vector loss over positive, hard negatives and, optionally,
/// the other positives of the batch.
pub fn oracle_batch_loss(batch: &[RawTriplet], wq: &[Vec<f64>], wd: &[Vec<f64>], in_batch: bool) -> f64 {
    let positives: Vec<Vec<f64>> = batch.iter().map(|t| project(&t.positive, wd)).collect();
    let mut total = 0.0;
    for (i, t) in batch.iter().enumerate() {
        let q = project(&t.query, wq);
        let mut negs: Vec<Vec<f64>> = t.negatives.iter().map(|n| project(n, wd)).collect();
        if in_batch {
            negs.extend(positives.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p.clone()));
        }
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        total += recast::cfdpr::contrastive_loss(&q, &positives[i], &refs).unwrap();
    }
    total / batch.len() as f64
}

pub struct GradientCheck {
    pub relative_error: f64,
    pub loss_gap: f64,
}

/// Compares analytic gradients against central differences of the oracle.
pub fn gradient_check(seed: u64, d_in: usize, d_out: usize, batch_size: usize, in_batch: bool) -> GradientCheck {
    use ndarray::Array2;
    use recast::cfdpr::{loss_gradients, EmbeddedTriplet, EncoderPair, EncoderRole, ProjectionEncoder};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let batch: Vec<RawTriplet> = (0..batch_size)
        .map(|i| RawTriplet {
            query: vec(d_in),
            positive: vec(d_in),
            negatives: (0..1 + i % 3).map(|_| vec(d_in)).collect(),
        })
        .collect();
    let scale = 1.0 / (d_in as f64).sqrt();
    let mut wq: Vec<Vec<f64>> = (0..d_in).map(|_| vec(d_out).into_iter().map(|x| x * scale).collect()).collect();
    let mut wd: Vec<Vec<f64>> = (0..d_in).map(|_| vec(d_out).into_iter().map(|x| x * scale).collect()).collect();

    let to_array = |w: &[Vec<f64>]| Array2::from_shape_fn((d_in, d_out), |(r, c)| w[r][c]);
    let encoders = EncoderPair {
        query: ProjectionEncoder::new(EncoderRole::Query, to_array(&wq)).unwrap(),
        document: ProjectionEncoder::new(EncoderRole::Document, to_array(&wd)).unwrap(),
    };
    let embedded: Vec<EmbeddedTriplet> = batch
        .iter()
        .map(|t| EmbeddedTriplet {
            query: t.query.clone().into(),
            positive: t.positive.clone().into(),
            hard_negatives: t.negatives.iter().map(|n| n.clone().into()).collect(),
        })
        .collect();
    let analytic = loss_gradients(&embedded, &encoders, in_batch).unwrap();
    let base = oracle_batch_loss(&batch, &wq, &wd, in_batch);

    let h = 1e-5;
    let (mut diff, mut norm) = (0.0, 0.0);
    for which in 0..2 {
        for r in 0..d_in {
            for c in 0..d_out {
                let w = if which == 0 { &mut wq } else { &mut wd };
                let orig = w[r][c];
                w[r][c] = orig + h;
                let plus = oracle_batch_loss(&batch, &wq, &wd, in_batch);
                let w = if which == 0 { &mut wq } else { &mut wd };
                w[r][c] = orig - h;
                let minus = oracle_batch_loss(&batch, &wq, &wd, in_batch);
                let w = if which == 0 { &mut wq } else { &mut wd };
                w[r][c] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = if which == 0 { analytic.query[[r, c]] } else { analytic.document[[r, c]] };
                diff += (a - numeric).powi(2);
                norm += a.abs().max(numeric.abs()).powi(2);
            }
        }
    }
    GradientCheck {
        relative_error: diff.sqrt() / norm.sqrt().max(1e-12),
        loss_gap: (analytic.loss - base).abs(),
    }
}
