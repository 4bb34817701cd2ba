//! Alignment pipeline: text transformation, then LLM summarization and
//! reasoning side by side, then concatenation into the classifier input.
//!
//! Summarization is one-shot: exemplar (input, summary) pairs collected from
//! training records are embedded in the system prompt of later calls.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{MultimodalRecord, TabularSchema};
use crate::llm::{CachedClient, Exchange, LlmError, Message, ProviderProfile};
use crate::prompt::{render, PromptTemplates};
use crate::textify::{assemble_sections, Captioner, ModalityTexts, TextifyError};

pub const SEGMENT_SEPARATOR: &str = "\n\n";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("all modality sections are empty")]
    EmptyInput,
    #[error("at least one exemplar is required")]
    NAtLeastOne,
    #[error("asked for {wanted} exemplars but only {available} training records exist")]
    NotEnoughRecords { wanted: usize, available: usize },
    #[error(transparent)]
    Textify(#[from] TextifyError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub input_sections: String,
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub enable_summarization: bool,
    pub enable_reasoning: bool,
    pub include_transformed_text: bool,
    pub exemplars: Vec<Exemplar>,
    pub profile: ProviderProfile,
    pub templates: PromptTemplates,
    pub label_cardinality: usize,
}

impl PipelineConfig {
    pub fn transform_only(label_cardinality: usize) -> Self {
        Self {
            enable_summarization: false,
            enable_reasoning: false,
            include_transformed_text: true,
            exemplars: Vec::new(),
            profile: ProviderProfile::mock(),
            templates: PromptTemplates::default(),
            label_cardinality,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Transform,
    Summary,
    Reasoning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedText {
    pub record_id: String,
    pub final_text: String,
    pub stage_outputs: BTreeMap<Stage, String>,
    pub transcript: Vec<Exchange>,
    pub sections: ModalityTexts,
    pub surrogate_image: bool,
}

/// Joins the enabled, non-empty segments in transform, summary, reasoning order.
pub fn compose_final_text(stage_outputs: &BTreeMap<Stage, String>, config: &PipelineConfig) -> String {
    let mut segments = Vec::new();
    if config.include_transformed_text {
        segments.extend(stage_outputs.get(&Stage::Transform));
    }
    if config.enable_summarization {
        segments.extend(stage_outputs.get(&Stage::Summary));
    }
    if config.enable_reasoning {
        segments.extend(stage_outputs.get(&Stage::Reasoning));
    }
    segments.iter().map(|s| s.as_str()).filter(|s| !s.is_empty()).collect::<Vec<_>>().join(SEGMENT_SEPARATOR)
}

/// Everything a pipeline run needs besides the record.
pub struct Pipeline<'a> {
    pub config: &'a PipelineConfig,
    pub schema: &'a TabularSchema,
    pub captioner: &'a Captioner,
    pub client: &'a CachedClient,
    pub image_enabled: bool,
}

impl Pipeline<'_> {
    pub fn summarize(&self, sections: &ModalityTexts, exemplars: &[Exemplar]) -> Result<Exchange, PipelineError> {
        if sections.is_empty() {
            return Err(PipelineError::EmptyInput);
        }
        let t = &self.config.templates;
        let shots = exemplars
            .iter()
            .map(|e| {
                render(
                    &t.summarize_exemplar,
                    &[("EXEMPLAR_INPUT", &e.input_sections), ("EXEMPLAR_SUMMARY", &e.summary)],
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        let joined = sections.joined();
        let request = self.config.profile.request(vec![
            Message::system(render(&t.summarize_system, &[("EXEMPLARS", &shots)])),
            Message::user(render(&t.summarize_user, &[("SECTIONS", &joined)])),
        ]);
        Ok(self.client.cached_complete(&request)?)
    }

    pub fn reason(&self, sections: &ModalityTexts) -> Result<Exchange, PipelineError> {
        if sections.is_empty() {
            return Err(PipelineError::EmptyInput);
        }
        let t = &self.config.templates;
        let k = self.config.label_cardinality.to_string();
        let k_last = self.config.label_cardinality.saturating_sub(1).to_string();
        let joined = sections.joined();
        let request = self.config.profile.request(vec![
            Message::system(render(&t.reason_system, &[("K", &k), ("K_MINUS_ONE", &k_last)])),
            Message::user(render(&t.reason_user, &[("SECTIONS", &joined)])),
        ]);
        Ok(self.client.cached_complete(&request)?)
    }

    /// Summarizes the first `n` training records by ascending id, without exemplars.
    pub fn collect_exemplars(&self, train: &[MultimodalRecord], n: usize) -> Result<Vec<Exemplar>, PipelineError> {
        if n == 0 {
            return Err(PipelineError::NAtLeastOne);
        }
        if n > train.len() {
            return Err(PipelineError::NotEnoughRecords { wanted: n, available: train.len() });
        }
        let mut chosen: Vec<&MultimodalRecord> = train.iter().collect();
        chosen.sort_by(|a, b| a.id.cmp(&b.id));
        chosen
            .into_iter()
            .take(n)
            .map(|record| {
                let sections = assemble_sections(record, self.schema, self.captioner, self.image_enabled)?.texts;
                let summary = self.summarize(&sections, &[])?.response.content;
                Ok(Exemplar { input_sections: sections.joined(), summary })
            })
            .collect()
    }

    /// Runs every enabled stage. Stages are skipped when all sections are empty.
    pub fn run(&self, record: &MultimodalRecord) -> Result<AlignedText, PipelineError> {
        let assembled = assemble_sections(record, self.schema, self.captioner, self.image_enabled)?;
        let sections = assembled.texts;
        let mut transcript: Vec<Exchange> = assembled.caption_exchange.into_iter().collect();
        let mut stage_outputs = BTreeMap::new();
        stage_outputs.insert(Stage::Transform, sections.joined());

        let has_input = !sections.is_empty();
        let want_summary = self.config.enable_summarization && has_input;
        let want_reasoning = self.config.enable_reasoning && has_input;
        let (summary, reasoning) = rayon::join(
            || want_summary.then(|| self.summarize(&sections, &self.config.exemplars)).transpose(),
            || want_reasoning.then(|| self.reason(&sections)).transpose(),
        );
        for (stage, enabled, exchange) in [
            (Stage::Summary, self.config.enable_summarization, summary?),
            (Stage::Reasoning, self.config.enable_reasoning, reasoning?),
        ] {
            if !enabled {
                continue;
            }
            let text = exchange.as_ref().map(|e| e.response.content.clone()).unwrap_or_default();
            stage_outputs.insert(stage, text);
            transcript.extend(exchange);
        }

        Ok(AlignedText {
            record_id: record.id.clone(),
            final_text: compose_final_text(&stage_outputs, self.config),
            stage_outputs,
            transcript,
            sections,
            surrogate_image: assembled.surrogate_image,
        })
    }
}
