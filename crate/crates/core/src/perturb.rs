//! Seeded imperfection operators: Gaussian image noise, word dropout and
//! column dropout.
//!
//! Every operator draws from a private stream keyed on
//! `(base_seed, record_id, modality)`, so results do not depend on call
//! order, thread schedule or any global generator. Level 0 is always the
//! identity.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{ImageCorruption, MultimodalRecord, TabularRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Table,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Text, Modality::Table];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Table => "table",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PerturbError {
    #[error("more than one perturbation targets the {0} modality")]
    DuplicateModalitySpec(Modality),
    #[error("perturbation level {0} is outside [0, 1]")]
    LevelOutOfRange(f64),
    #[error("level grid must start at 0")]
    GridMissingZero,
    #[error("level grid must be strictly ascending")]
    GridNotAscending,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub modality: Modality,
    pub level: f64,
    pub base_seed: u64,
}

impl PerturbationSpec {
    pub fn new(modality: Modality, level: f64, base_seed: u64) -> Result<Self, PerturbError> {
        check_level(level)?;
        Ok(Self { modality, level, base_seed })
    }
}

fn check_level(level: f64) -> Result<(), PerturbError> {
    if (0.0..=1.0).contains(&level) {
        Ok(())
    } else {
        Err(PerturbError::LevelOutOfRange(level))
    }
}

/// Ascending perturbation levels for one modality, starting at the clean baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LevelGrid(Vec<f64>);

impl LevelGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self, PerturbError> {
        if levels.first() != Some(&0.0) {
            return Err(PerturbError::GridMissingZero);
        }
        for &l in &levels {
            check_level(l)?;
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PerturbError::GridNotAscending);
        }
        Ok(Self(levels))
    }

    pub fn default_for(modality: Modality) -> Self {
        let levels = match modality {
            Modality::Image | Modality::Table => vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9],
            Modality::Text => vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        };
        Self(levels)
    }

    pub fn levels(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for LevelGrid {
    type Error = PerturbError;
    fn try_from(levels: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(levels)
    }
}

impl From<LevelGrid> for Vec<f64> {
    fn from(grid: LevelGrid) -> Self {
        grid.0
    }
}

/// 64-bit key of the per-record stream for one modality.
pub fn stream_key(base_seed: u64, record_id: &str, modality: Modality) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"textalign.stream.v1");
    hasher.update(base_seed.to_le_bytes());
    hasher.update((record_id.len() as u64).to_le_bytes());
    hasher.update(record_id.as_bytes());
    hasher.update(modality.tag().as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

pub fn record_stream(base_seed: u64, record_id: &str, modality: Modality) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(base_seed, record_id, modality))
}

/// Drops whitespace-delimited tokens independently with probability `p`.
/// Survivors are rejoined with single spaces.
pub fn drop_words(text: &str, p: f64, base_seed: u64, record_id: &str) -> String {
    drop_words_in_stream(text, p, &mut record_stream(base_seed, record_id, Modality::Text))
}

pub(crate) fn drop_words_in_stream(text: &str, p: f64, rng: &mut impl Rng) -> String {
    if p <= 0.0 {
        return text.to_string();
    }
    text.split_whitespace().filter(|_| rng.random::<f64>() >= p).collect::<Vec<_>>().join(" ")
}

/// Removes each non-protected column independently with probability `p`.
pub fn drop_columns(
    row: &TabularRow,
    p: f64,
    base_seed: u64,
    record_id: &str,
    protected: &HashSet<String>,
) -> TabularRow {
    if p <= 0.0 {
        return row.clone();
    }
    let mut rng = record_stream(base_seed, record_id, Modality::Table);
    let mut out = row.clone();
    out.retain(|col| protected.contains(col) || rng.random::<f64>() >= p);
    out
}

/// Adds N(0, (level·255)²) noise to every channel value, rounding and clamping to 8 bits.
pub fn add_gaussian_noise(image: &RgbImage, level: f64, base_seed: u64, record_id: &str) -> RgbImage {
    if level <= 0.0 {
        return image.clone();
    }
    let mut rng = record_stream(base_seed, record_id, Modality::Image);
    let normal = Normal::new(0.0, level * 255.0).expect("finite non-negative sigma");
    let mut out = image.clone();
    for v in out.iter_mut() {
        let noisy = f64::from(*v) + normal.sample(&mut rng);
        *v = noisy.round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Applies each spec to its modality; id, label and untargeted modalities are untouched.
pub fn apply_spec(record: &MultimodalRecord, specs: &[PerturbationSpec]) -> Result<MultimodalRecord, PerturbError> {
    let mut seen = HashSet::new();
    for spec in specs {
        check_level(spec.level)?;
        if !seen.insert(spec.modality) {
            return Err(PerturbError::DuplicateModalitySpec(spec.modality));
        }
    }
    let mut out = record.clone();
    for spec in specs.iter().filter(|s| s.level > 0.0) {
        match spec.modality {
            Modality::Text => out.text = drop_words(&record.text, spec.level, spec.base_seed, &record.id),
            Modality::Table => {
                out.tabular = drop_columns(&record.tabular, spec.level, spec.base_seed, &record.id, &HashSet::new())
            }
            Modality::Image => {
                if let Some(px) = &record.pixels {
                    out.pixels = Some(Arc::new(add_gaussian_noise(px, spec.level, spec.base_seed, &record.id)));
                }
                out.image_corruption = Some(ImageCorruption { level: spec.level, base_seed: spec.base_seed });
            }
        }
    }
    Ok(out)
}
