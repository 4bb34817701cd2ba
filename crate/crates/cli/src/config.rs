//! Harness configuration: one JSON document describing data, providers,
//! pipelines, training and sweeps. Relative paths resolve against the
//! directory of the config file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use textalign::dataset::TabularSchema;
use textalign::eval::{SweepConfig, SweepTarget};
use textalign::model::{FeaturizerConfig, TrainConfig};
use textalign::perturb::{LevelGrid, Modality, PerturbError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub csv: PathBuf,
    pub schema: PathBuf,
    #[serde(default)]
    pub captions: Option<PathBuf>,
    #[serde(default)]
    pub images_dir: Option<PathBuf>,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default = "yes")]
    pub image_modality: bool,
}

fn default_fraction() -> f64 {
    0.8
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CaptionerConfig {
    Precomputed,
    Provider { provider: String },
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig::Precomputed
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "mock_model")]
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn mock_model() -> String {
    "mock".into()
}

fn default_max_tokens() -> u32 {
    512
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineProfile {
    #[serde(default)]
    pub summarization: bool,
    #[serde(default)]
    pub reasoning: bool,
    #[serde(default = "yes")]
    pub include_transformed_text: bool,
    #[serde(default = "default_provider")]
    pub provider: String,
    /// Number of one-shot exemplars collected for summarization.
    #[serde(default = "one")]
    pub exemplars: usize,
}

fn default_provider() -> String {
    "mock".into()
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub name: String,
    pub target: SweepTarget,
    /// Missing grids for targeted modalities fall back to the defaults.
    #[serde(default)]
    pub grids: BTreeMap<Modality, Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub repetitions: usize,
    pub pipelines: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub captioner: CaptionerConfig,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    pub providers: BTreeMap<String, ProviderConfig>,
    pub pipelines: BTreeMap<String, PipelineProfile>,
    #[serde(default)]
    pub featurizer: FeaturizerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub sweeps: Vec<SweepEntry>,
    #[serde(default = "default_cache")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_jobs")]
    pub max_in_flight: usize,
    #[serde(default = "yes")]
    pub transcripts: bool,
    /// Route every stage to the mock provider; no network access.
    #[serde(default)]
    pub offline: bool,
}

fn default_cache() -> PathBuf {
    "cache".into()
}

fn default_output() -> PathBuf {
    "runs".into()
}

fn default_jobs() -> usize {
    4
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
}

impl HarnessConfig {
    /// Reads a config file, or the config embedded in a run manifest.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let parse = |source| ConfigError::Parse { path: path.into(), source };
        let value: serde_json::Value = serde_json::from_str(&text).map_err(parse)?;
        let body = match value.get("manifest_version") {
            Some(_) => value.get("config").cloned().unwrap_or(serde_json::Value::Null),
            None => value,
        };
        let mut config: HarnessConfig = serde_json::from_value(body).map_err(parse)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = fs::canonicalize(&base).unwrap_or(base);
        config.resolve_paths(&base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.csv);
        fix(&mut self.dataset.schema);
        self.dataset.captions.as_mut().map(fix);
        self.dataset.images_dir.as_mut().map(fix);
        self.templates_dir.as_mut().map(fix);
        fix(&mut self.cache_dir);
        fix(&mut self.output_dir);
    }

    /// Sweep definition with defaults filled in. Assumes a validated config.
    pub fn sweep_config(&self, entry: &SweepEntry) -> Result<SweepConfig, PerturbError> {
        let mut grids = BTreeMap::new();
        for m in entry.target.modalities() {
            let grid = match entry.grids.get(&m) {
                Some(levels) => LevelGrid::new(levels.clone())?,
                None => LevelGrid::default_for(m),
            };
            grids.insert(m, grid);
        }
        Ok(SweepConfig {
            name: entry.name.clone(),
            target: entry.target,
            grids,
            base_seed: entry.seed.unwrap_or(self.base_seed),
            repetitions: entry.repetitions,
        })
    }

    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut push = |code: Code, path: String, message: String| out.push(Diagnostic { code, path, message });

        for (path, file) in
            [("dataset.csv", Some(&self.dataset.csv)), ("dataset.captions", self.dataset.captions.as_ref())]
        {
            if let Some(f) = file.filter(|f| !f.is_file()) {
                push(Code::MissingFile, path.into(), format!("{} does not exist", f.display()));
            }
        }
        for (path, dir) in [("dataset.images_dir", &self.dataset.images_dir), ("templates_dir", &self.templates_dir)] {
            if let Some(d) = dir.as_ref().filter(|d| !d.is_dir()) {
                push(Code::MissingFile, path.into(), format!("{} is not a directory", d.display()));
            }
        }
        if !self.dataset.schema.is_file() {
            push(
                Code::MissingFile,
                "dataset.schema".into(),
                format!("{} does not exist", self.dataset.schema.display()),
            );
        } else if let Err(e) = TabularSchema::from_json_file(&self.dataset.schema) {
            push(Code::SchemaInvalid, "dataset.schema".into(), e.to_string());
        }
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            push(Code::InvalidFraction, "dataset.train_fraction".into(), "must lie strictly between 0 and 1".into());
        }
        if self.dataset.image_modality
            && self.captioner == CaptionerConfig::Precomputed
            && self.dataset.captions.is_none()
        {
            push(
                Code::CaptionsMissing,
                "dataset.captions".into(),
                "precomputed captioner needs a captions file".into(),
            );
        }
        if let CaptionerConfig::Provider { provider } = &self.captioner {
            if !self.providers.contains_key(provider) {
                push(Code::UnknownProvider, "captioner.provider".into(), format!("no provider `{provider}`"));
            }
        }

        for (id, p) in &self.providers {
            if p.kind == ProviderKind::Http && p.endpoint.as_deref().is_none_or(str::is_empty) {
                push(
                    Code::MissingEndpoint,
                    format!("providers.{id}.endpoint"),
                    "http provider needs an endpoint".into(),
                );
            }
            if !(p.temperature >= 0.0) || p.max_tokens == 0 {
                push(Code::InvalidProvider, format!("providers.{id}"), "temperature ≥ 0 and max_tokens > 0".into());
            }
        }
        for (id, p) in &self.pipelines {
            if !self.providers.contains_key(&p.provider) {
                push(
                    Code::UnknownProvider,
                    format!("pipelines.{id}.provider"),
                    format!("no provider `{}`", p.provider),
                );
            }
            if !p.include_transformed_text && !p.summarization && !p.reasoning {
                push(Code::EmptyPipeline, format!("pipelines.{id}"), "pipeline produces no text".into());
            }
        }
        if let Err(e) = self.featurizer.validate() {
            push(Code::InvalidFeaturizer, "featurizer".into(), e.to_string());
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0) || !(t.l2 >= 0.0) || t.learning_rate * t.l2 >= 1.0 {
            push(Code::InvalidTrain, "train".into(), "need learning_rate > 0, l2 ≥ 0 and learning_rate·l2 < 1".into());
        }
        let mut train_modalities = BTreeSet::new();
        for (i, spec) in t.train_time_perturbation.iter().enumerate() {
            if !(0.0..=1.0).contains(&spec.level) {
                push(
                    Code::LevelOutOfRange,
                    format!("train.train_time_perturbation[{i}]"),
                    format!("level {}", spec.level),
                );
            }
            if !train_modalities.insert(spec.modality) {
                push(Code::DuplicateModality, format!("train.train_time_perturbation[{i}]"), spec.modality.to_string());
            }
        }

        if self.sweeps.is_empty() {
            push(Code::NoSweeps, "sweeps".into(), "define at least one sweep".into());
        }
        let mut names = BTreeSet::new();
        for (i, s) in self.sweeps.iter().enumerate() {
            let at = format!("sweeps[{i}]");
            if !names.insert(s.name.as_str()) {
                push(Code::DuplicateSweep, at.clone(), format!("sweep `{}` defined twice", s.name));
            }
            if s.pipelines.is_empty() {
                push(Code::NoSweepPipelines, at.clone(), "sweep lists no pipelines".into());
            }
            for p in &s.pipelines {
                if !self.pipelines.contains_key(p) {
                    push(Code::UnknownPipeline, format!("{at}.pipelines"), format!("no pipeline `{p}`"));
                }
            }
            if s.repetitions == 0 {
                push(Code::InvalidRepetitions, at.clone(), "repetitions must be positive".into());
            }
            let targeted = s.target.modalities();
            let mut lengths = BTreeSet::new();
            for (m, levels) in &s.grids {
                let gpath = format!("{at}.grids.{m}");
                if !targeted.contains(m) {
                    push(
                        Code::UntargetedGrid,
                        gpath.clone(),
                        format!("target {} ignores this grid", s.target.as_str()),
                    );
                }
                match LevelGrid::new(levels.clone()) {
                    Ok(_) => {}
                    Err(PerturbError::GridMissingZero) => {
                        push(Code::GridMissingZero, gpath, "grid must start at 0".into())
                    }
                    Err(PerturbError::GridNotAscending) => {
                        push(Code::GridNotAscending, gpath, "grid must be strictly ascending".into())
                    }
                    Err(e) => push(Code::LevelOutOfRange, gpath, e.to_string()),
                }
            }
            for m in &targeted {
                lengths.insert(s.grids.get(m).map_or_else(|| LevelGrid::default_for(*m).len(), Vec::len));
            }
            if lengths.len() > 1 {
                push(Code::GridLengthMismatch, format!("{at}.grids"), "all-modality grids need equal lengths".into());
            }
        }
        if self.jobs == 0 || self.max_in_flight == 0 {
            push(Code::InvalidConcurrency, "jobs".into(), "jobs and max_in_flight must be positive".into());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Code {
    MissingFile,
    SchemaInvalid,
    InvalidFraction,
    CaptionsMissing,
    UnknownProvider,
    MissingEndpoint,
    InvalidProvider,
    EmptyPipeline,
    InvalidFeaturizer,
    InvalidTrain,
    NoSweeps,
    DuplicateSweep,
    NoSweepPipelines,
    UnknownPipeline,
    InvalidRepetitions,
    UntargetedGrid,
    GridMissingZero,
    GridNotAscending,
    LevelOutOfRange,
    GridLengthMismatch,
    DuplicateModality,
    InvalidConcurrency,
    DatasetInvalid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: Code,
    pub path: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serde_json::to_string(self).expect("diagnostic serializes"))
    }
}
