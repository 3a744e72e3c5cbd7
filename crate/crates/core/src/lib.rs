//! Counterfactual data augmentation: a dense counterfactual retriever over a
//! task corpus, keyword-constrained LLM editing, and intrinsic metrics for the
//! generated edits.

pub mod cfdpr;
pub mod dataset;
pub mod embedder;
pub mod extraction;
pub mod http;
pub mod metrics;
pub mod index;
pub mod reranker;
pub mod editor;
pub mod pipeline;
pub mod annotation;
