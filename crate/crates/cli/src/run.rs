//! Experiment orchestration: load data, train one classifier per pipeline,
//! run the configured sweeps and write reports, transcripts and a manifest.
//!
//! A run directory is named after a hash of everything that determines its
//! results, so re-running the same config resumes instead of recomputing.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use textalign::dataset::{load_captions, load_dataset, split_dataset, MultimodalRecord, TabularSchema};
use textalign::eval::{Evaluator, RecordOutcome, ReportMeta, ReportRow, SweepConfig, SweepObserver};
use textalign::llm::{CachedClient, HttpProvider, MockProvider, Provider, ProviderProfile};
use textalign::model::{featurize, train, Checkpoint};
use textalign::perturb::apply_spec;
use textalign::pipeline::{Pipeline, PipelineConfig};
use textalign::prompt::PromptTemplates;
use textalign::textify::{Captioner, ProviderCaptioner};

use crate::config::{CaptionerConfig, Diagnostic, HarnessConfig, PipelineProfile, ProviderConfig, ProviderKind};

pub const MANIFEST_VERSION: u32 = 1;

/// Builds provider clients; tests swap in counting doubles.
pub trait ProviderFactory: Sync {
    fn build(&self, id: &str, spec: &ProviderConfig) -> anyhow::Result<Arc<dyn Provider>>;
}

pub struct DefaultProviders;

impl ProviderFactory for DefaultProviders {
    fn build(&self, _id: &str, spec: &ProviderConfig) -> anyhow::Result<Arc<dyn Provider>> {
        Ok(match spec.kind {
            ProviderKind::Mock => Arc::new(MockProvider),
            ProviderKind::Http => {
                Arc::new(HttpProvider::from_env(spec.endpoint.clone().context("http provider without endpoint")?))
            }
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub offline: bool,
    pub sweeps: Option<Vec<String>>,
    pub pipelines: Option<Vec<String>>,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid config ({} problem(s))", .0.len())]
    Invalid(Vec<Diagnostic>),
    #[error("run directory {} belongs to a different configuration", .0.display())]
    RunIdCollision(PathBuf),
    #[error("{source:#}; completed levels saved in {}", checkpoint.display())]
    Interrupted { source: anyhow::Error, checkpoint: PathBuf },
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Invalid(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub run_dir: PathBuf,
    /// Report files, computed now or found from an earlier attempt.
    pub reports: Vec<PathBuf>,
    /// Reports reused without recomputation.
    pub reused: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub run_id: String,
    pub config_hash: String,
    pub version: String,
    pub inputs: BTreeMap<String, String>,
    pub config: HarnessConfig,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> anyhow::Result<String> {
    Ok(sha256_hex(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

fn dir_hash(dir: &Path) -> anyhow::Result<String> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    let mut hasher = Sha256::new();
    for path in entries.iter().filter(|p| p.is_file()) {
        hasher.update(path.file_name().unwrap_or_default().as_encoded_bytes());
        hasher.update(file_hash(path)?.as_bytes());
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Content hashes of every input file, keyed by role.
pub fn input_hashes(config: &HarnessConfig) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    out.insert("dataset.csv".into(), file_hash(&config.dataset.csv)?);
    out.insert("dataset.schema".into(), file_hash(&config.dataset.schema)?);
    if let Some(p) = &config.dataset.captions {
        out.insert("dataset.captions".into(), file_hash(p)?);
    }
    if let Some(d) = &config.dataset.images_dir {
        out.insert("dataset.images_dir".into(), dir_hash(d)?);
    }
    Ok(out)
}

pub fn load_templates(config: &HarnessConfig) -> anyhow::Result<PromptTemplates> {
    match &config.templates_dir {
        Some(dir) => {
            PromptTemplates::from_dir(dir).with_context(|| format!("reading templates from {}", dir.display()))
        }
        None => Ok(PromptTemplates::default()),
    }
}

/// Hash over everything that can change a report: input contents, prompt
/// templates, pipelines, providers, training, sweeps and seeds. Paths,
/// concurrency and output locations are excluded.
pub fn config_hash(config: &HarnessConfig, inputs: &BTreeMap<String, String>, templates: &PromptTemplates) -> String {
    let identity = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "inputs": inputs,
        "train_fraction": config.dataset.train_fraction,
        "image_modality": config.dataset.image_modality,
        "captioner": config.captioner,
        "templates": templates,
        "providers": config.providers,
        "pipelines": config.pipelines,
        "featurizer": config.featurizer,
        "train": config.train,
        "sweeps": config.sweeps,
        "base_seed": config.base_seed,
        "offline": config.offline,
    });
    sha256_hex(identity.to_string().as_bytes())
}

pub fn run_dir_for(config: &HarnessConfig, run_id: &str) -> PathBuf {
    config.output_dir.join(run_id)
}

/// Provider profile a pipeline stage sends; offline runs are re-routed to
/// the mock so their cache entries never mix with live ones.
fn stage_profile(config: &HarnessConfig, provider: &str) -> ProviderProfile {
    let spec = &config.providers[provider];
    ProviderProfile {
        provider_id: if config.offline { "mock".into() } else { provider.to_string() },
        model: spec.model.clone(),
        temperature: spec.temperature,
        max_tokens: spec.max_tokens,
    }
}

fn report_stem(sweep: &str, pipeline: &str) -> String {
    format!("{sweep}__{pipeline}")
}

fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn run(
    config: &HarnessConfig,
    options: &RunOptions,
    factory: &dyn ProviderFactory,
) -> Result<RunSummary, RunError> {
    let mut config = config.clone();
    config.offline |= options.offline;
    let diagnostics = config.validate();
    if !diagnostics.is_empty() {
        return Err(RunError::Invalid(diagnostics));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(config.jobs).build().context("building thread pool")?;
    pool.install(|| Runner::prepare(config, factory)?.execute(options))
}

struct Runner {
    config: HarnessConfig,
    schema: TabularSchema,
    templates: PromptTemplates,
    client: Arc<CachedClient>,
    captioner: Captioner,
    train: Vec<MultimodalRecord>,
    test: Vec<MultimodalRecord>,
    config_hash: String,
    run_id: String,
    run_dir: PathBuf,
}

impl Runner {
    fn prepare(config: HarnessConfig, factory: &dyn ProviderFactory) -> Result<Self, RunError> {
        let inputs = input_hashes(&config)?;
        let templates = load_templates(&config)?;
        let config_hash = config_hash(&config, &inputs, &templates);
        let run_id = config_hash[..12].to_string();
        let run_dir = run_dir_for(&config, &run_id);

        let manifest_path = run_dir.join("manifest.json");
        if manifest_path.exists() {
            let existing: Value = serde_json::from_slice(&fs::read(&manifest_path).context("reading manifest")?)
                .context("parsing manifest")?;
            if existing.get("config_hash").and_then(Value::as_str) != Some(config_hash.as_str()) {
                return Err(RunError::RunIdCollision(run_dir));
            }
        } else {
            for sub in ["reports", "transcripts", "models"] {
                fs::create_dir_all(run_dir.join(sub)).with_context(|| format!("creating {}", run_dir.display()))?;
            }
            let manifest = Manifest {
                manifest_version: MANIFEST_VERSION,
                run_id: run_id.clone(),
                config_hash: config_hash.clone(),
                version: env!("CARGO_PKG_VERSION").into(),
                inputs,
                config: config.clone(),
            };
            let body = serde_json::to_string_pretty(&manifest).context("serializing manifest")? + "\n";
            write_atomic(&manifest_path, body.as_bytes())?;
        }

        let schema = TabularSchema::from_json_file(&config.dataset.schema).context("loading schema")?;
        let records = load_dataset(
            &config.dataset.csv,
            &schema,
            config.dataset.captions.as_deref(),
            config.dataset.images_dir.as_deref(),
        )
        .context("loading dataset")?;
        let split =
            split_dataset(&records, config.dataset.train_fraction, config.base_seed).context("splitting dataset")?;

        let mut client = CachedClient::new(&config.cache_dir, config.max_in_flight).context("opening cache")?;
        if config.offline {
            client.register("mock", Arc::new(MockProvider));
        } else {
            for (id, spec) in &config.providers {
                client.register(id.clone(), factory.build(id, spec).with_context(|| format!("provider `{id}`"))?);
            }
        }
        let client = Arc::new(client);

        let captioner = match &config.captioner {
            CaptionerConfig::Precomputed => {
                let captions = match &config.dataset.captions {
                    Some(path) => load_captions(path).context("loading captions")?,
                    None => HashMap::new(),
                };
                if config.dataset.image_modality {
                    Captioner::precomputed(captions, &records).context("building captioner")?
                } else {
                    Captioner::Precomputed(captions)
                }
            }
            CaptionerConfig::Provider { provider } => Captioner::Provider(ProviderCaptioner {
                client: Arc::clone(&client),
                profile: stage_profile(&config, provider),
                system_template: templates.caption_system.clone(),
                user_template: templates.caption_user.clone(),
            }),
        };

        Ok(Self {
            config,
            schema,
            templates,
            client,
            captioner,
            train: split.train,
            test: split.test,
            config_hash,
            run_id,
            run_dir,
        })
    }

    fn execute(&self, options: &RunOptions) -> Result<RunSummary, RunError> {
        let wanted = |list: &Option<Vec<String>>, name: &str| list.as_ref().is_none_or(|l| l.iter().any(|n| n == name));
        if let Some(names) = &options.sweeps {
            for n in names.iter().filter(|n| !self.config.sweeps.iter().any(|s| &s.name == *n)) {
                return Err(anyhow::anyhow!("unknown sweep `{n}`").into());
            }
        }
        if let Some(names) = &options.pipelines {
            for n in names.iter().filter(|n| !self.config.pipelines.contains_key(*n)) {
                return Err(anyhow::anyhow!("unknown pipeline `{n}`").into());
            }
        }

        // Pipelines in config order, each with the sweeps that use it.
        let mut plan: BTreeMap<&str, Vec<&crate::config::SweepEntry>> = BTreeMap::new();
        for sweep in self.config.sweeps.iter().filter(|s| wanted(&options.sweeps, &s.name)) {
            for p in sweep.pipelines.iter().filter(|p| wanted(&options.pipelines, p)) {
                plan.entry(p.as_str()).or_default().push(sweep);
            }
        }

        let mut summary =
            RunSummary { run_id: self.run_id.clone(), run_dir: self.run_dir.clone(), reports: Vec::new(), reused: 0 };
        for (name, sweeps) in plan {
            let pending: Vec<_> = sweeps
                .into_iter()
                .filter(|s| {
                    let done = self.report_path(&s.name, name).exists();
                    if done {
                        summary.reused += 1;
                        summary.reports.push(self.report_path(&s.name, name));
                    }
                    !done
                })
                .collect();
            if pending.is_empty() {
                continue;
            }
            let profile = &self.config.pipelines[name];
            let pipeline_config = self.pipeline_config(profile)?;
            let pipeline = self.pipeline(&pipeline_config);
            let exemplars = if profile.summarization && profile.exemplars > 0 {
                pipeline.collect_exemplars(&self.train, profile.exemplars).context("collecting exemplars")?
            } else {
                Vec::new()
            };
            let pipeline_config = PipelineConfig { exemplars, ..pipeline_config };
            let pipeline = self.pipeline(&pipeline_config);
            let checkpoint = self.train_model(name, &pipeline)?;
            let model = checkpoint.model().context("restoring model")?;

            for sweep in pending {
                let sweep_config = self.config.sweep_config(sweep).context("building sweep")?;
                let evaluator = Evaluator {
                    pipeline: self.pipeline(&pipeline_config),
                    model: &model,
                    featurizer: &self.config.featurizer,
                };
                let path = self.run_sweep(&evaluator, &sweep_config, name, profile)?;
                summary.reports.push(path);
            }
        }
        self.write_summary()?;
        Ok(summary)
    }

    fn pipeline_config(&self, profile: &PipelineProfile) -> anyhow::Result<PipelineConfig> {
        Ok(PipelineConfig {
            enable_summarization: profile.summarization,
            enable_reasoning: profile.reasoning,
            include_transformed_text: profile.include_transformed_text,
            exemplars: Vec::new(),
            profile: stage_profile(&self.config, &profile.provider),
            templates: self.templates.clone(),
            label_cardinality: self.schema.label_cardinality,
        })
    }

    fn pipeline<'a>(&'a self, config: &'a PipelineConfig) -> Pipeline<'a> {
        Pipeline {
            config,
            schema: &self.schema,
            captioner: &self.captioner,
            client: &self.client,
            image_enabled: self.config.dataset.image_modality,
        }
    }

    fn report_path(&self, sweep: &str, pipeline: &str) -> PathBuf {
        self.run_dir.join("reports").join(format!("{}.json", report_stem(sweep, pipeline)))
    }

    /// Trains on the aligned text of the training split. Training is
    /// deterministic, so a resumed run retrains rather than trusting a
    /// checkpoint from an attempt that may have been cut short.
    fn train_model(&self, name: &str, pipeline: &Pipeline<'_>) -> anyhow::Result<Checkpoint> {
        let specs = &self.config.train.train_time_perturbation;
        let texts = self
            .train
            .par_iter()
            .map(|record| {
                let record = apply_spec(record, specs)?;
                Ok(pipeline
                    .run(&record)
                    .with_context(|| format!("aligning training record `{}`", record.id))?
                    .final_text)
            })
            .collect::<anyhow::Result<Vec<String>>>()?;
        let features: Vec<_> = texts.iter().map(|t| featurize(t, &self.config.featurizer)).collect();
        let labels: Vec<usize> = self.train.iter().map(|r| r.label).collect();
        let (model, report) = train(&features, &labels, self.schema.label_cardinality, &self.config.train)
            .with_context(|| format!("training `{name}`"))?;
        let checkpoint = Checkpoint::new(&model, &self.config.featurizer);
        let models = self.run_dir.join("models");
        checkpoint.save(&models.join(format!("{name}.json"))).context("saving checkpoint")?;
        let log = serde_json::to_string_pretty(&json!({"pipeline": name, "n_train": labels.len(), "report": report}))?;
        write_atomic(&models.join(format!("{name}.train.json")), (log + "\n").as_bytes())?;
        Ok(checkpoint)
    }

    fn run_sweep(
        &self,
        evaluator: &Evaluator<'_>,
        sweep: &SweepConfig,
        pipeline: &str,
        profile: &PipelineProfile,
    ) -> Result<PathBuf, RunError> {
        let stem = report_stem(&sweep.name, pipeline);
        let partial = self.run_dir.join("reports").join(format!("{stem}.partial.jsonl"));
        let transcript = self.run_dir.join("transcripts").join(format!("{stem}.jsonl"));
        let completed = read_partial(&partial)?;
        if self.config.transcripts {
            truncate_transcript(&transcript, completed.len())?;
        } else {
            let _ = fs::remove_file(&transcript);
        }
        let observer = FileObserver {
            sweep,
            pipeline,
            partial: &partial,
            transcript: self.config.transcripts.then_some(transcript.as_path()),
            buffer: Mutex::new(Vec::new()),
        };
        let meta = ReportMeta {
            pipeline: pipeline.to_string(),
            config_hash: self.config_hash.clone(),
            provider: if self.config.offline { "mock".into() } else { profile.provider.clone() },
        };
        eprintln!(
            "sweep {} / {pipeline}: {} level(s), {} reused",
            sweep.name,
            sweep.level_count().unwrap_or(0),
            completed.len()
        );
        let report = evaluator
            .run_sweep(&self.test, sweep, meta, &completed, &observer)
            .map_err(|e| RunError::Interrupted { source: e.into(), checkpoint: partial.clone() })?;
        let json_path = self.report_path(&sweep.name, pipeline);
        write_atomic(&json_path.with_extension("csv"), report.to_csv().as_bytes())?;
        write_atomic(&json_path, report.to_json().as_bytes())?;
        let _ = fs::remove_file(&partial);
        Ok(json_path)
    }

    /// Comparison tables for every sweep with at least one finished report.
    fn write_summary(&self) -> anyhow::Result<()> {
        let reports = crate::report::load_reports(&self.run_dir)?;
        let text = crate::report::render_markdown(&reports)?;
        write_atomic(&self.run_dir.join("summary.md"), text.as_bytes())
    }
}

fn read_partial(path: &Path) -> anyhow::Result<Vec<ReportRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rows: Vec<ReportRow> = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // A torn final line from a crash is ignored; the level is recomputed.
        match serde_json::from_str::<ReportRow>(&line) {
            Ok(row) if row.index == rows.len() => rows.push(row),
            _ => break,
        }
    }
    Ok(rows)
}

/// Keeps only transcript lines belonging to already completed levels.
fn truncate_transcript(path: &Path, completed: usize) -> anyhow::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    if completed == 0 {
        fs::remove_file(path)?;
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let level = serde_json::from_str::<Value>(&line).ok().and_then(|v| v["level_index"].as_u64());
        if level.is_some_and(|l| (l as usize) < completed) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

/// Appends finished levels to the partial checkpoint and their per-record
/// transcripts to the transcript file.
struct FileObserver<'a> {
    sweep: &'a SweepConfig,
    pipeline: &'a str,
    partial: &'a Path,
    transcript: Option<&'a Path>,
    buffer: Mutex<Vec<String>>,
}

const TRANSCRIPT_PROMPT_LIMIT: usize = 4096;

fn clip(s: &str) -> String {
    if s.len() <= TRANSCRIPT_PROMPT_LIMIT {
        return s.to_string();
    }
    let mut end = TRANSCRIPT_PROMPT_LIMIT;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}...[{} bytes omitted]", &s[..end], s.len() - end)
}

fn append(path: &Path, text: &str) -> std::io::Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(text.as_bytes())?;
    file.sync_data()
}

impl SweepObserver for FileObserver<'_> {
    fn record(&self, level_index: usize, repetition: usize, perturbed: &MultimodalRecord, outcome: &RecordOutcome) {
        if self.transcript.is_none() {
            return;
        }
        let exchanges: Vec<Value> = outcome
            .aligned
            .transcript
            .iter()
            .map(|e| {
                json!({
                    "digest": e.digest.as_str(),
                    "user": clip(e.request.last_user_message().unwrap_or_default()),
                    "response": e.response.content,
                })
            })
            .collect();
        let line = json!({
            "sweep": self.sweep.name,
            "pipeline": self.pipeline,
            "level_index": level_index,
            "repetition": repetition,
            "levels": self.sweep.levels_at(level_index),
            "record_id": perturbed.id,
            "label": outcome.label,
            "predicted": outcome.predicted,
            "input": {
                "tabular": perturbed.tabular,
                "text": perturbed.text,
                "image_corruption": perturbed.image_corruption,
            },
            "sections": outcome.aligned.sections,
            "stage_outputs": outcome.aligned.stage_outputs,
            "final_text": outcome.aligned.final_text,
            "surrogate_image": outcome.aligned.surrogate_image,
            "exchanges": exchanges,
        });
        self.buffer.lock().expect("observer lock").push(line.to_string());
    }

    fn row(&self, row: &ReportRow) {
        let lines: Vec<String> = std::mem::take(&mut *self.buffer.lock().expect("observer lock"));
        if let Some(path) = self.transcript {
            let mut text = lines.join("\n");
            if !text.is_empty() {
                text.push('\n');
            }
            if let Err(e) = append(path, &text) {
                eprintln!("warning: cannot write transcript {}: {e}", path.display());
            }
        }
        let line = serde_json::to_string(row).expect("row serializes") + "\n";
        if let Err(e) = append(self.partial, &line) {
            eprintln!("warning: cannot write checkpoint {}: {e}", self.partial.display());
        }
    }
}

/// Fails unless `dir` holds a finished run.
pub fn read_manifest(run_dir: &Path) -> anyhow::Result<Manifest> {
    let path = run_dir.join("manifest.json");
    if !path.exists() {
        bail!("{} has no manifest.json", run_dir.display());
    }
    Ok(serde_json::from_slice(&fs::read(&path)?).with_context(|| format!("parsing {}", path.display()))?)
}
