#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};
use textalign::llm::{Completion, CompletionRequest, LlmError, MockProvider, Provider};
use textalign_cli::config::ProviderConfig;
use textalign_cli::run::ProviderFactory;

pub fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel).canonicalize().unwrap()
}

pub fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel).canonicalize().unwrap()
}

/// Synthetic-set config with the given pipelines and sweeps, writing under `dir`.
pub fn synthetic_config(dir: &Path, pipelines: Value, sweeps: Value) -> Value {
    json!({
        "dataset": {
            "csv": data("synthetic/records.csv"),
            "schema": data("synthetic/schema.json"),
            "captions": data("synthetic/captions.jsonl"),
        },
        "providers": {"mock": {"kind": "mock"}},
        "pipelines": pipelines,
        "train": {"epochs": 5, "learning_rate": 0.5, "seed": 7},
        "sweeps": sweeps,
        "cache_dir": dir.join("cache"),
        "output_dir": dir.join("runs"),
        "base_seed": 42,
        "jobs": 4,
        "max_in_flight": 4,
    })
}

pub fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

/// Answers like the mock and counts upstream calls; optionally fails after a budget.
pub struct Counting {
    pub calls: AtomicUsize,
    pub fail_after: Option<usize>,
}

impl Provider for Counting {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_after.is_some_and(|limit| n >= limit) {
            return Err(LlmError::ProviderError { status: Some(503), body: "unavailable".into() });
        }
        MockProvider.complete(request)
    }
}

/// Hands out one shared counting provider for every configured profile.
pub struct CountingFactory(pub Arc<Counting>);

impl CountingFactory {
    pub fn new(fail_after: Option<usize>) -> Self {
        Self(Arc::new(Counting { calls: AtomicUsize::new(0), fail_after }))
    }

    pub fn calls(&self) -> usize {
        self.0.calls.load(Ordering::SeqCst)
    }
}

impl ProviderFactory for CountingFactory {
    fn build(&self, _id: &str, _spec: &ProviderConfig) -> anyhow::Result<Arc<dyn Provider>> {
        Ok(self.0.clone())
    }
}

pub fn read_reports(run_dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(run_dir.join("reports"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "csv")))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}
