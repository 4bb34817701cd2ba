//! Text transformation: every modality of a record becomes plain text.
//!
//! Tables are serialized as "The {description} is {value}." sentences,
//! images become captions and free text passes through untouched.

use std::collections::HashMap;
use std::io::Cursor;
use std::sync::Arc;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{MultimodalRecord, TabularRow, TabularSchema};
use crate::llm::{CachedClient, Exchange, LlmError, Message, ProviderProfile};
use crate::perturb::{drop_words_in_stream, record_stream, Modality};
use crate::prompt::render;

pub const UNKNOWN_VALUE: &str = "Unknown";

#[derive(Debug, Error)]
pub enum TextifyError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("no caption available for record `{0}`")]
    CaptionUnavailable(String),
    #[error("provider error: {0}")]
    ProviderError(#[from] LlmError),
}

/// Per-modality text; an empty string encodes an absent modality.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityTexts {
    pub record_id: String,
    pub table_text: String,
    pub image_text: String,
    pub raw_text: String,
}

impl ModalityTexts {
    /// Non-empty sections in table, image, text order.
    pub fn sections(&self) -> Vec<&str> {
        [&self.table_text, &self.image_text, &self.raw_text]
            .into_iter()
            .map(String::as_str)
            .filter(|s| !s.trim().is_empty())
            .collect()
    }

    /// Non-empty sections separated by blank lines.
    pub fn joined(&self) -> String {
        self.sections().join("\n\n")
    }

    pub fn is_empty(&self) -> bool {
        self.sections().is_empty()
    }
}

pub fn serialize_tabular(row: &TabularRow, schema: &TabularSchema) -> Result<String, TextifyError> {
    let mut sentences = Vec::with_capacity(row.len());
    for spec in &schema.columns {
        if let Some(value) = row.get(&spec.name) {
            sentences.push(format!("The {} is {}.", spec.description, value.unwrap_or(UNKNOWN_VALUE)));
        }
    }
    if let Some(unknown) = row.keys().find(|k| schema.column(k).is_none()) {
        return Err(TextifyError::UnknownColumn(unknown.to_string()));
    }
    Ok(sentences.join(" "))
}

/// Drops caption words at rate `level`; stands in for re-captioning a noisy
/// image when no vision provider is configured.
pub fn degrade_caption_offline(caption: &str, level: f64, base_seed: u64, record_id: &str) -> String {
    drop_words_in_stream(caption, level, &mut record_stream(base_seed, record_id, Modality::Image))
}

pub struct ProviderCaptioner {
    pub client: Arc<CachedClient>,
    pub profile: ProviderProfile,
    pub system_template: String,
    pub user_template: String,
}

pub enum Captioner {
    /// id → caption; falls back to the record's own caption field.
    Precomputed(HashMap<String, String>),
    Provider(ProviderCaptioner),
}

impl Captioner {
    /// Builds a lookup captioner, failing on the first record without a caption.
    pub fn precomputed<'a>(
        captions: HashMap<String, String>,
        records: impl IntoIterator<Item = &'a MultimodalRecord>,
    ) -> Result<Self, TextifyError> {
        let mut captions = captions;
        for r in records {
            if !captions.contains_key(&r.id) {
                match &r.caption {
                    Some(c) => {
                        captions.insert(r.id.clone(), c.clone());
                    }
                    None => return Err(TextifyError::CaptionUnavailable(r.id.clone())),
                }
            }
        }
        Ok(Captioner::Precomputed(captions))
    }

    pub fn is_surrogate_for_noise(&self) -> bool {
        matches!(self, Captioner::Precomputed(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    pub text: String,
    pub exchange: Option<Exchange>,
    /// True when image noise was approximated by caption word dropout.
    pub surrogate: bool,
}

fn image_slot(record: &MultimodalRecord) -> Result<String, TextifyError> {
    if let Some(px) = &record.pixels {
        let mut png = Vec::new();
        px.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| LlmError::InvalidRequest(format!("cannot encode image: {e}")))?;
        return Ok(format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(png)));
    }
    record
        .image
        .as_ref()
        .map(|p| p.display().to_string())
        .ok_or_else(|| TextifyError::CaptionUnavailable(record.id.clone()))
}

pub fn caption_image(record: &MultimodalRecord, captioner: &Captioner) -> Result<Caption, TextifyError> {
    match captioner {
        Captioner::Precomputed(map) => {
            let clean = map
                .get(&record.id)
                .or(record.caption.as_ref())
                .ok_or_else(|| TextifyError::CaptionUnavailable(record.id.clone()))?;
            Ok(match record.image_corruption {
                Some(c) if c.level > 0.0 => Caption {
                    text: degrade_caption_offline(clean, c.level, c.base_seed, &record.id),
                    exchange: None,
                    surrogate: true,
                },
                _ => Caption { text: clean.clone(), exchange: None, surrogate: false },
            })
        }
        Captioner::Provider(p) => {
            let image = image_slot(record)?;
            let vars = [("RECORD_ID", record.id.as_str()), ("IMAGE", image.as_str())];
            let request = p.profile.request(vec![
                Message::system(render(&p.system_template, &vars)),
                Message::user(render(&p.user_template, &vars)),
            ]);
            let exchange = p.client.cached_complete(&request)?;
            Ok(Caption { text: exchange.response.content.clone(), exchange: Some(exchange), surrogate: false })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assembled {
    pub texts: ModalityTexts,
    pub caption_exchange: Option<Exchange>,
    pub surrogate_image: bool,
}

pub fn assemble_sections(
    record: &MultimodalRecord,
    schema: &TabularSchema,
    captioner: &Captioner,
    image_enabled: bool,
) -> Result<Assembled, TextifyError> {
    let table_text = serialize_tabular(&record.tabular, schema)?;
    let caption = if image_enabled { Some(caption_image(record, captioner)?) } else { None };
    let (image_text, caption_exchange, surrogate_image) = match caption {
        Some(c) => (c.text, c.exchange, c.surrogate),
        None => (String::new(), None, false),
    };
    Ok(Assembled {
        texts: ModalityTexts { record_id: record.id.clone(), table_text, image_text, raw_text: record.text.clone() },
        caption_exchange,
        surrogate_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ColumnKind, ColumnSpec, ImageCorruption};
    use crate::llm::MockProvider;

    fn schema() -> TabularSchema {
        let col = |name: &str, description: &str| ColumnSpec {
            name: name.into(),
            description: description.into(),
            kind: ColumnKind::Categorical,
        };
        TabularSchema {
            id_column: "PetID".into(),
            label_column: "AdoptionSpeed".into(),
            label_cardinality: 5,
            text_column: "Description".into(),
            columns: vec![
                col("Type", "type of pet"),
                col("Name", "name of pet"),
                col("Breed2", "secondary breed of pet (if pet is of mixed breed)"),
            ],
        }
    }

    fn row(pairs: &[(&str, Option<&str>)]) -> TabularRow {
        pairs.iter().map(|(k, v)| (k.to_string(), v.map(str::to_string))).collect()
    }

    #[test]
    fn serialization_sentences() {
        let s = schema();
        assert_eq!(
            serialize_tabular(&row(&[("Type", Some("Dog")), ("Name", Some("Filo"))]), &s).unwrap(),
            "The type of pet is Dog. The name of pet is Filo."
        );
        assert_eq!(
            serialize_tabular(&row(&[("Breed2", None)]), &s).unwrap(),
            "The secondary breed of pet (if pet is of mixed breed) is Unknown."
        );
        assert_eq!(serialize_tabular(&TabularRow::new(), &s).unwrap(), "");
        assert!(matches!(
            serialize_tabular(&row(&[("Weight", Some("3"))]), &s),
            Err(TextifyError::UnknownColumn(c)) if c == "Weight"
        ));
    }

    #[test]
    fn precomputed_lookup() {
        let cap = Captioner::Precomputed([("id1".to_string(), "The image shows a dog.".to_string())].into());
        let r1 = MultimodalRecord::new("id1", TabularRow::new(), "", 0);
        assert_eq!(caption_image(&r1, &cap).unwrap().text, "The image shows a dog.");
        let r2 = MultimodalRecord::new("id2", TabularRow::new(), "", 0);
        assert!(matches!(caption_image(&r2, &cap), Err(TextifyError::CaptionUnavailable(id)) if id == "id2"));
        assert!(Captioner::precomputed(HashMap::new(), [&r2]).is_err());
    }

    #[test]
    fn corrupted_image_degrades_lookup_caption() {
        let cap = Captioner::Precomputed([("a".to_string(), "one two three four".to_string())].into());
        let mut r = MultimodalRecord::new("a", TabularRow::new(), "", 0);
        r.image_corruption = Some(ImageCorruption { level: 1.0, base_seed: 1 });
        let out = caption_image(&r, &cap).unwrap();
        assert_eq!((out.text.as_str(), out.surrogate), ("", true));
    }

    #[test]
    fn caption_degradation_endpoints() {
        assert_eq!(degrade_caption_offline("A dog sits.", 0.0, 3, "x"), "A dog sits.");
        assert_eq!(degrade_caption_offline("A dog sits.", 1.0, 3, "x"), "");
    }

    #[test]
    fn provider_captioner_uses_mock_rule() {
        let dir = tempfile::tempdir().unwrap();
        let client = Arc::new(CachedClient::new(dir.path(), 2).unwrap().with_provider("mock", Arc::new(MockProvider)));
        let templates = crate::prompt::PromptTemplates::default();
        let cap = Captioner::Provider(ProviderCaptioner {
            client,
            profile: ProviderProfile::mock(),
            system_template: templates.caption_system,
            user_template: templates.caption_user,
        });
        let mut r = MultimodalRecord::new("pet-9", TabularRow::new(), "", 0);
        assert!(matches!(caption_image(&r, &cap), Err(TextifyError::CaptionUnavailable(_))));
        r.pixels = Some(Arc::new(image::RgbImage::new(2, 2)));
        let out = caption_image(&r, &cap).unwrap();
        assert_eq!(out.text, "An image described by pet-9.");
        assert!(out.exchange.unwrap().request.messages[1].content.contains("data:image/png;base64,"));
    }

    #[test]
    fn assemble_passes_text_through() {
        let s = schema();
        let cap = Captioner::Precomputed(HashMap::new());
        let mut r = MultimodalRecord::new("a", row(&[("Type", Some("Cat"))]), "  Raw\ttext, kept  as-is ", 1);
        r.caption = Some("A cat.".into());
        let out = assemble_sections(&r, &s, &cap, true).unwrap();
        assert_eq!(out.texts.table_text, "The type of pet is Cat.");
        assert_eq!(out.texts.image_text, "A cat.");
        assert_eq!(out.texts.raw_text, r.text);
        assert_eq!(out.texts.sections().len(), 3);
        let off = assemble_sections(&r, &s, &cap, false).unwrap();
        assert_eq!(off.texts.image_text, "");
        assert_eq!(off.texts.joined(), format!("The type of pet is Cat.\n\n{}", r.text));
    }
}
