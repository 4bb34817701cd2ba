//! Ingestion, validation and splitting of tabular + text + image records.
//!
//! A dataset is a UTF-8 CSV whose header names the id column, the label
//! column, the free-text column and every feature column of a
//! [`TabularSchema`]. Captions come from an optional JSON-lines file and
//! images from an optional directory of `<id>.png` / `<id>.jpg` files.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unexpected column `{0}` in header")]
    UnexpectedColumn(String),
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("label out of range for record `{0}`")]
    LabelOutOfRange(String),
    #[error("malformed row at line {0}")]
    MalformedRow(u64),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("malformed captions file at line {0}")]
    MalformedCaption(usize),
    #[error("failed to decode image {path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("split needs at least two records")]
    TooFewRecords,
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical,
    Numeric,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    /// Interpolated into serialized sentences as "The {description} is {value}."
    pub description: String,
    pub kind: ColumnKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub id_column: String,
    pub label_column: String,
    pub label_cardinality: usize,
    pub text_column: String,
    pub columns: Vec<ColumnSpec>,
}

impl TabularSchema {
    pub fn from_json_file(path: &Path) -> Result<Self, DatasetError> {
        let schema: TabularSchema = serde_json::from_str(&fs::read_to_string(path)?)?;
        schema.check()?;
        Ok(schema)
    }

    /// Checks the schema invariants; returns the first violation.
    pub fn check(&self) -> Result<(), DatasetError> {
        let invalid = |msg: String| Err(DatasetError::InvalidSchema(msg));
        if self.label_cardinality == 0 {
            return invalid("label_cardinality must be positive".into());
        }
        let reserved = [&self.id_column, &self.label_column, &self.text_column];
        if self.id_column == self.label_column
            || self.id_column == self.text_column
            || self.label_column == self.text_column
        {
            return invalid("id, label and text columns must be distinct".into());
        }
        let mut seen = HashSet::new();
        for col in &self.columns {
            if !seen.insert(col.name.as_str()) {
                return invalid(format!("duplicate column `{}`", col.name));
            }
            if reserved.contains(&&col.name) {
                return invalid(format!("feature column `{}` clashes with a reserved column", col.name));
            }
            if col.description.trim().is_empty() {
                return invalid(format!("column `{}` has an empty description", col.name));
            }
        }
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }
}

/// Ordered column → optional value map. Absent cells are `None`, never `""`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TabularRow(Vec<(String, Option<String>)>);

impl TabularRow {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn push(&mut self, column: impl Into<String>, value: Option<String>) {
        self.0.push((column.into(), value));
    }

    pub fn get(&self, column: &str) -> Option<Option<&str>> {
        self.0.iter().find(|(c, _)| c == column).map(|(_, v)| v.as_deref())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Option<&str>)> {
        self.0.iter().map(|(c, v)| (c.as_str(), v.as_deref()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(c, _)| c.as_str())
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.0.retain(|(c, _)| keep(c));
    }
}

impl FromIterator<(String, Option<String>)> for TabularRow {
    fn from_iter<I: IntoIterator<Item = (String, Option<String>)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl Serialize for TabularRow {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for TabularRow {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct RowVisitor;
        impl<'de> Visitor<'de> for RowVisitor {
            type Value = TabularRow;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object of column values")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<TabularRow, A::Error> {
                let mut row = TabularRow::new();
                while let Some((k, v)) = access.next_entry::<String, Option<String>>()? {
                    row.push(k, v);
                }
                Ok(row)
            }
        }
        deserializer.deserialize_map(RowVisitor)
    }
}

/// Pending image corruption for records whose caption is looked up rather
/// than regenerated from pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageCorruption {
    pub level: f64,
    pub base_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalRecord {
    pub id: String,
    pub tabular: TabularRow,
    pub text: String,
    pub image: Option<PathBuf>,
    pub caption: Option<String>,
    pub label: usize,
    #[serde(skip)]
    pub pixels: Option<Arc<RgbImage>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_corruption: Option<ImageCorruption>,
}

impl MultimodalRecord {
    pub fn new(id: impl Into<String>, tabular: TabularRow, text: impl Into<String>, label: usize) -> Self {
        Self {
            id: id.into(),
            tabular,
            text: text.into(),
            image: None,
            caption: None,
            label,
            pixels: None,
            image_corruption: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    UnknownColumn(String),
    DuplicateColumn(String),
    ColumnOutOfOrder(String),
    MissingImageModality,
    LabelOutOfRange(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownColumn(c) => write!(f, "UnknownColumn({c})"),
            Violation::DuplicateColumn(c) => write!(f, "DuplicateColumn({c})"),
            Violation::ColumnOutOfOrder(c) => write!(f, "ColumnOutOfOrder({c})"),
            Violation::MissingImageModality => f.write_str("MissingImageModality"),
            Violation::LabelOutOfRange(l) => write!(f, "LabelOutOfRange({l})"),
        }
    }
}

/// Lists every invariant the record breaks against `schema`.
pub fn validate_record(record: &MultimodalRecord, schema: &TabularSchema, image_enabled: bool) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = HashSet::new();
    let mut last_pos = None;
    for key in record.tabular.keys() {
        if !seen.insert(key) {
            violations.push(Violation::DuplicateColumn(key.to_string()));
            continue;
        }
        match schema.columns.iter().position(|c| c.name == key) {
            None => violations.push(Violation::UnknownColumn(key.to_string())),
            Some(pos) => {
                if last_pos.is_some_and(|last| pos < last) {
                    violations.push(Violation::ColumnOutOfOrder(key.to_string()));
                }
                last_pos = Some(pos);
            }
        }
    }
    if image_enabled && record.image.is_none() && record.caption.is_none() && record.pixels.is_none() {
        violations.push(Violation::MissingImageModality);
    }
    if record.label >= schema.label_cardinality {
        violations.push(Violation::LabelOutOfRange(record.label));
    }
    violations
}

#[derive(Deserialize)]
struct CaptionLine {
    id: String,
    caption: String,
}

/// Reads a JSON-lines captions file into an id → caption map.
pub fn load_captions(path: &Path) -> Result<HashMap<String, String>, DatasetError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut captions = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CaptionLine = serde_json::from_str(&line).map_err(|_| DatasetError::MalformedCaption(i + 1))?;
        captions.insert(parsed.id, parsed.caption);
    }
    Ok(captions)
}

fn find_image(dir: &Path, id: &str) -> Option<PathBuf> {
    ["png", "jpg"].iter().map(|ext| dir.join(format!("{id}.{ext}"))).find(|p| p.is_file())
}

/// Decodes an image file into 8-bit RGB; grayscale is expanded to 3 channels.
pub fn load_rgb(path: &Path) -> Result<RgbImage, DatasetError> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| DatasetError::Image { path: path.to_path_buf(), detail: e.to_string() })
}

pub fn load_dataset(
    csv_path: &Path,
    schema: &TabularSchema,
    captions_path: Option<&Path>,
    images_dir: Option<&Path>,
) -> Result<Vec<MultimodalRecord>, DatasetError> {
    schema.check()?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(csv_path)?;
    let headers = reader.headers()?.clone();
    let index_of = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let id_idx = index_of(&schema.id_column)?;
    let label_idx = index_of(&schema.label_column)?;
    let text_idx = index_of(&schema.text_column)?;
    let feature_idx: Vec<usize> = schema.columns.iter().map(|c| index_of(&c.name)).collect::<Result<_, _>>()?;
    let known: HashSet<&str> = schema
        .feature_names()
        .chain([schema.id_column.as_str(), schema.label_column.as_str(), schema.text_column.as_str()])
        .collect();
    if let Some(extra) = headers.iter().find(|h| !known.contains(h)) {
        return Err(DatasetError::UnexpectedColumn(extra.to_string()));
    }

    let captions = captions_path.map(load_captions).transpose()?.unwrap_or_default();
    let mut ids = HashSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| match e.position() {
            Some(pos) => DatasetError::MalformedRow(pos.line()),
            None => DatasetError::Csv(e),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let cell = |i: usize| row.get(i).ok_or(DatasetError::MalformedRow(line));
        let id = cell(id_idx)?.to_string();
        if !ids.insert(id.clone()) {
            return Err(DatasetError::DuplicateId(id));
        }
        let label: usize = cell(label_idx)?.trim().parse().map_err(|_| DatasetError::MalformedRow(line))?;
        if label >= schema.label_cardinality {
            return Err(DatasetError::LabelOutOfRange(id));
        }
        let mut tabular = TabularRow::new();
        for (col, &i) in schema.columns.iter().zip(&feature_idx) {
            let raw = cell(i)?;
            tabular.push(col.name.clone(), (!raw.is_empty()).then(|| raw.to_string()));
        }
        let mut record = MultimodalRecord::new(id, tabular, cell(text_idx)?, label);
        record.caption = captions.get(&record.id).cloned();
        if let Some(dir) = images_dir {
            if let Some(path) = find_image(dir, &record.id) {
                record.pixels = Some(Arc::new(load_rgb(&path)?));
                record.image = Some(path);
            }
        }
        records.push(record);
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<MultimodalRecord>,
    pub test: Vec<MultimodalRecord>,
    pub seed: u64,
}

/// Seeded partition into train and test. Both sides keep the input order.
pub fn split_dataset(
    records: &[MultimodalRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    if records.len() < 2 {
        return Err(DatasetError::TooFewRecords);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(train_fraction));
    }
    let n_train = (train_fraction * records.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; records.len()];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (train, test) = records.iter().zip(&in_train).fold((Vec::new(), Vec::new()), |(mut tr, mut te), (r, &t)| {
        if t {
            tr.push(r.clone())
        } else {
            te.push(r.clone())
        }
        (tr, te)
    });
    Ok(DatasetSplit { train, test, seed })
}
