//! Robustness sweeps: perturb test records level by level, push them through
//! the pipeline and classifier, and report accuracy and drop ratio.
//!
//! Drop ratio is the relative accuracy loss against the sweep's own level-0
//! accuracy: `(clean - perturbed) / clean`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::MultimodalRecord;
use crate::model::{accuracy, featurize, predict, FeaturizerConfig, LinearModel, ModelError};
use crate::perturb::{apply_spec, LevelGrid, Modality, PerturbError, PerturbationSpec};
use crate::pipeline::{AlignedText, Pipeline, PipelineError};

pub const CSV_HEADER: &str = "sweep,target,level_index,image_level,text_level,table_level,n,accuracy,drop_ratio";

pub const DOWNSTREAM_MODEL_NOTE: &str =
    "hashed bag-of-words multinomial logistic regression (stands in for a transformer downstream model)";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("clean accuracy is zero; drop ratio is undefined")]
    ZeroCleanAccuracy,
    #[error("accuracy {0} outside [0, 1]")]
    AccuracyOutOfRange(f64),
    #[error("reports do not share a sweep definition")]
    MismatchedSweeps,
    #[error("no reports to compare")]
    NoReports,
    #[error("no test records")]
    NoRecords,
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("record `{record_id}` failed at level {level_index}: {source}")]
    Record {
        record_id: String,
        level_index: usize,
        #[source]
        source: PipelineError,
    },
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn drop_ratio(acc_clean: f64, acc_pert: f64) -> Result<f64, EvalError> {
    if !(0.0..=1.0).contains(&acc_pert) {
        return Err(EvalError::AccuracyOutOfRange(acc_pert));
    }
    if !(acc_clean > 0.0 && acc_clean <= 1.0) {
        return Err(if acc_clean == 0.0 {
            EvalError::ZeroCleanAccuracy
        } else {
            EvalError::AccuracyOutOfRange(acc_clean)
        });
    }
    Ok((acc_clean - acc_pert) / acc_clean)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepTarget {
    Image,
    Text,
    Table,
    All,
}

impl SweepTarget {
    pub fn modalities(self) -> Vec<Modality> {
        match self {
            SweepTarget::Image => vec![Modality::Image],
            SweepTarget::Text => vec![Modality::Text],
            SweepTarget::Table => vec![Modality::Table],
            SweepTarget::All => Modality::ALL.to_vec(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepTarget::Image => "image",
            SweepTarget::Text => "text",
            SweepTarget::Table => "table",
            SweepTarget::All => "all",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub name: String,
    pub target: SweepTarget,
    pub grids: BTreeMap<Modality, LevelGrid>,
    pub base_seed: u64,
    #[serde(default = "one")]
    pub repetitions: usize,
}

fn one() -> usize {
    1
}

impl SweepConfig {
    /// Single-modality sweep over the default grid.
    pub fn single(name: impl Into<String>, modality: Modality, base_seed: u64) -> Self {
        Self {
            name: name.into(),
            target: match modality {
                Modality::Image => SweepTarget::Image,
                Modality::Text => SweepTarget::Text,
                Modality::Table => SweepTarget::Table,
            },
            grids: [(modality, LevelGrid::default_for(modality))].into(),
            base_seed,
            repetitions: 1,
        }
    }

    /// Number of level indices; validates that the targeted grids line up.
    pub fn level_count(&self) -> Result<usize, EvalError> {
        if self.repetitions == 0 {
            return Err(EvalError::InvalidSweep("repetitions must be positive".into()));
        }
        let mut count = None;
        for m in self.target.modalities() {
            let grid = self
                .grids
                .get(&m)
                .ok_or_else(|| EvalError::InvalidSweep(format!("no {m} grid for target {}", self.target.as_str())))?;
            match count {
                Some(c) if c != grid.len() => {
                    return Err(EvalError::InvalidSweep("all-modality grids must have equal lengths".into()))
                }
                _ => count = Some(grid.len()),
            }
        }
        count.ok_or_else(|| EvalError::InvalidSweep("empty sweep".into()))
    }

    /// Levels applied at `index`; untargeted modalities stay at 0.
    pub fn levels_at(&self, index: usize) -> Levels {
        let mut levels = Levels::default();
        for m in self.target.modalities() {
            let value = self.grids[&m].levels()[index];
            match m {
                Modality::Image => levels.image = value,
                Modality::Text => levels.text = value,
                Modality::Table => levels.table = value,
            }
        }
        levels
    }

    pub fn repetition_seed(&self, repetition: usize) -> u64 {
        self.base_seed.wrapping_add(repetition as u64)
    }

    pub fn specs_at(&self, index: usize, repetition: usize) -> Vec<PerturbationSpec> {
        let seed = self.repetition_seed(repetition);
        let levels = self.levels_at(index);
        self.target
            .modalities()
            .into_iter()
            .map(|m| PerturbationSpec { modality: m, level: levels.get(m), base_seed: seed })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Levels {
    pub image: f64,
    pub text: f64,
    pub table: f64,
}

impl Levels {
    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Image => self.image,
            Modality::Text => self.text,
            Modality::Table => self.table,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub index: usize,
    pub levels: Levels,
    pub n: usize,
    pub accuracy: f64,
    pub drop_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub sweep: String,
    pub pipeline: String,
    pub target: SweepTarget,
    pub config_hash: String,
    pub sweep_hash: String,
    pub provider: String,
    pub downstream_model: String,
    pub surrogate_image: bool,
    pub clean_accuracy: f64,
    pub rows: Vec<ReportRow>,
}

impl RobustnessReport {
    pub fn label(&self) -> String {
        format!("{}/{}", self.sweep, self.pipeline)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{},{},{}",
                    csv_field(&self.label()),
                    self.target.as_str(),
                    r.index,
                    r.levels.image,
                    r.levels.text,
                    r.levels.table,
                    r.n,
                    r.accuracy,
                    r.drop_ratio
                )
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        render_csv(std::slice::from_ref(self))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(reports: &[RobustnessReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for line in reports.iter().flat_map(RobustnessReport::csv_rows) {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Hash of the sweep definition plus the evaluated record ids.
pub fn sweep_hash(sweep: &SweepConfig, records: &[MultimodalRecord]) -> String {
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let body = serde_json::to_vec(&(&sweep.name, sweep.target, &sweep.grids, sweep.base_seed, sweep.repetitions, ids))
        .expect("sweep serializes");
    hex::encode(Sha256::digest(body))
}

/// Trained model and the pipeline that produced its inputs.
pub struct Evaluator<'a> {
    pub pipeline: Pipeline<'a>,
    pub model: &'a LinearModel,
    pub featurizer: &'a FeaturizerConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordOutcome {
    pub aligned: AlignedText,
    pub predicted: usize,
    pub label: usize,
}

/// Receives per-record outcomes and finished rows during a sweep.
pub trait SweepObserver: Sync {
    fn record(&self, _level_index: usize, _repetition: usize, _perturbed: &MultimodalRecord, _outcome: &RecordOutcome) {
    }
    fn row(&self, _row: &ReportRow) {}
}

pub struct NoObserver;

impl SweepObserver for NoObserver {}

impl Evaluator<'_> {
    /// Perturbs, aligns and classifies every record; output order matches input order.
    pub fn evaluate(
        &self,
        records: &[MultimodalRecord],
        specs: &[PerturbationSpec],
        level_index: usize,
    ) -> Result<Vec<(MultimodalRecord, RecordOutcome)>, EvalError> {
        records
            .par_iter()
            .map(|record| {
                let perturbed = apply_spec(record, specs)?;
                let aligned = self.pipeline.run(&perturbed).map_err(|source| EvalError::Record {
                    record_id: record.id.clone(),
                    level_index,
                    source,
                })?;
                let (predicted, _) = predict(self.model, &featurize(&aligned.final_text, self.featurizer))?;
                Ok((perturbed, RecordOutcome { aligned, predicted, label: record.label }))
            })
            .collect()
    }

    pub fn accuracy_of(outcomes: &[(MultimodalRecord, RecordOutcome)]) -> Result<f64, EvalError> {
        let predicted: Vec<usize> = outcomes.iter().map(|(_, o)| o.predicted).collect();
        let labels: Vec<usize> = outcomes.iter().map(|(_, o)| o.label).collect();
        Ok(accuracy(&predicted, &labels)?)
    }

    /// Accuracy on unperturbed records.
    pub fn clean_accuracy(&self, records: &[MultimodalRecord]) -> Result<f64, EvalError> {
        Self::accuracy_of(&self.evaluate(records, &[], 0)?)
    }

    /// Runs every level of `sweep`. Rows in `completed` (a prefix from an
    /// interrupted run) are reused instead of recomputed.
    pub fn run_sweep(
        &self,
        records: &[MultimodalRecord],
        sweep: &SweepConfig,
        meta: ReportMeta,
        completed: &[ReportRow],
        observer: &dyn SweepObserver,
    ) -> Result<RobustnessReport, EvalError> {
        if records.is_empty() {
            return Err(EvalError::NoRecords);
        }
        let levels = sweep.level_count()?;
        let mut raw: Vec<(usize, Levels, f64)> = Vec::with_capacity(levels);
        let mut surrogate = false;
        for index in 0..levels {
            if let Some(done) = completed.get(index).filter(|r| r.index == index && r.n == records.len()) {
                raw.push((index, done.levels, done.accuracy));
                surrogate |= self.pipeline.image_enabled
                    && self.pipeline.captioner.is_surrogate_for_noise()
                    && done.levels.image > 0.0;
                continue;
            }
            let mut per_seed = Vec::with_capacity(sweep.repetitions);
            for repetition in 0..sweep.repetitions {
                let outcomes = self.evaluate(records, &sweep.specs_at(index, repetition), index)?;
                for (perturbed, outcome) in &outcomes {
                    surrogate |= outcome.aligned.surrogate_image;
                    observer.record(index, repetition, perturbed, outcome);
                }
                per_seed.push(Self::accuracy_of(&outcomes)?);
            }
            let acc = mean(&per_seed);
            raw.push((index, sweep.levels_at(index), acc));
            observer.row(&ReportRow {
                index,
                levels: sweep.levels_at(index),
                n: records.len(),
                accuracy: acc,
                drop_ratio: drop_ratio(raw[0].2, acc)?,
            });
        }
        let clean = raw[0].2;
        let rows = raw
            .into_iter()
            .map(|(index, levels, accuracy)| {
                Ok(ReportRow { index, levels, n: records.len(), accuracy, drop_ratio: drop_ratio(clean, accuracy)? })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        Ok(RobustnessReport {
            sweep: sweep.name.clone(),
            pipeline: meta.pipeline,
            target: sweep.target,
            config_hash: meta.config_hash,
            sweep_hash: sweep_hash(sweep, records),
            provider: meta.provider,
            downstream_model: DOWNSTREAM_MODEL_NOTE.to_string(),
            surrogate_image: surrogate,
            clean_accuracy: clean,
            rows,
        })
    }
}

/// Identification fields copied into a report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportMeta {
    pub pipeline: String,
    pub config_hash: String,
    pub provider: String,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub accuracy: f64,
    pub drop_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub index: usize,
    pub levels: Levels,
    /// One entry per config, in `Comparison::configs` order.
    pub entries: Vec<ComparisonEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub sweep: String,
    pub target: SweepTarget,
    pub configs: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    /// Config with the smallest drop ratio at the highest level (first on ties).
    pub most_robust: String,
}

impl Comparison {
    /// Largest absolute accuracy / drop-ratio difference between configs `a` and `b`.
    pub fn max_difference(&self, a: usize, b: usize) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| {
                let (x, y) = (&r.entries[a], &r.entries[b]);
                [(x.accuracy - y.accuracy).abs(), (x.drop_ratio - y.drop_ratio).abs()]
            })
            .fold(0.0, f64::max)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "### {} ({})\n", self.sweep, self.target.as_str());
        out.push_str("| level | image | text | table |");
        for c in &self.configs {
            let _ = write!(out, " {c} acc | {c} drop |");
        }
        out.push_str("\n|---|---|---|---|");
        out.push_str(&"---|---|".repeat(self.configs.len()));
        out.push('\n');
        for row in &self.rows {
            let _ =
                write!(out, "| {} | {} | {} | {} |", row.index, row.levels.image, row.levels.text, row.levels.table);
            for e in &row.entries {
                let _ = write!(out, " {:.4} | {:.4} |", e.accuracy, e.drop_ratio);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "\nLowest drop ratio at the highest level: **{}**", self.most_robust);
        out
    }
}

pub fn compare_configs(reports: &[RobustnessReport]) -> Result<Comparison, EvalError> {
    let first = reports.first().ok_or(EvalError::NoReports)?;
    if reports.iter().any(|r| r.sweep_hash != first.sweep_hash || r.rows.len() != first.rows.len()) {
        return Err(EvalError::MismatchedSweeps);
    }
    let rows = first
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| ComparisonRow {
            index: row.index,
            levels: row.levels,
            entries: reports
                .iter()
                .map(|r| ComparisonEntry { accuracy: r.rows[i].accuracy, drop_ratio: r.rows[i].drop_ratio })
                .collect(),
        })
        .collect::<Vec<_>>();
    let best = rows.last().map_or(0, |last| {
        last.entries
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bv), (i, e)| if e.drop_ratio < bv { (i, e.drop_ratio) } else { (bi, bv) })
            .0
    });
    Ok(Comparison {
        sweep: first.sweep.clone(),
        target: first.target,
        configs: reports.iter().map(|r| r.pipeline.clone()).collect(),
        rows,
        most_robust: reports[best].pipeline.clone(),
    })
}
