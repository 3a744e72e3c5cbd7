#![allow(dead_code)]

use std::path::{Path, PathBuf};

use recast::pipeline::{self, RunOptions, Workspace};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/nli50")
}

pub fn copy_fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(fixture_dir()).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            std::fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
        }
    }
    dir
}

/// Runs every stage the annotation pool depends on.
pub fn prepared_workspace(dir: &Path) -> Workspace {
    let ws = Workspace::load(&dir.join("config.toml")).unwrap();
    let opts = RunOptions::default();
    pipeline::ingest(&ws).unwrap();
    pipeline::embed(&ws, &opts).unwrap();
    pipeline::train_retriever(&ws, &opts).unwrap();
    pipeline::build_index(&ws, &opts).unwrap();
    pipeline::train_reranker(&ws).unwrap();
    ws
}
