//! Hashed bag-of-words features and a multinomial logistic regression
//! trained by per-example SGD.
//!
//! Training is single-threaded and fully determined by the config and the
//! data order. L2 decay is applied lazily through a global weight scale so
//! each update touches only the active features.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

use crate::perturb::PerturbationSpec;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("need at least {k} examples, got {n}")]
    TooFewExamples { n: usize, k: usize },
    #[error("label {0} out of range")]
    LabelOutOfRange(usize),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("accuracy of an empty set")]
    Empty,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint content hash mismatch")]
    ChecksumMismatch,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub hash_dim: usize,
    pub lowercase: bool,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self { hash_dim: 1 << 18, lowercase: true }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hash_dim < 2 || !self.hash_dim.is_power_of_two() {
            return Err(ModelError::InvalidConfig(format!("hash_dim {} is not a power of two ≥ 2", self.hash_dim)));
        }
        Ok(())
    }
}

/// Sparse vector with strictly increasing indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub dim: usize,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseVector {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, indices: Vec::new(), values: Vec::new() }
    }

    /// Builds from unordered pairs, summing duplicates and dropping zeros.
    pub fn from_pairs(dim: usize, mut pairs: Vec<(usize, f64)>) -> Self {
        pairs.sort_by_key(|&(i, _)| i);
        let mut out = Self::zeros(dim);
        for (i, v) in pairs {
            match out.indices.last() {
                Some(&last) if last == i => *out.values.last_mut().unwrap() += v,
                _ => {
                    out.indices.push(i);
                    out.values.push(v);
                }
            }
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    text.unicode_words().map(|w| if lowercase { w.to_lowercase() } else { w.to_string() }).collect()
}

/// Raw token counts per hash bucket, without normalization.
pub fn bucket_counts(text: &str, config: &FeaturizerConfig) -> SparseVector {
    let d = config.hash_dim;
    let pairs =
        tokenize(text, config.lowercase).iter().map(|t| ((fnv1a64(t.as_bytes()) % d as u64) as usize, 1.0)).collect();
    SparseVector::from_pairs(d, pairs)
}

pub fn featurize(text: &str, config: &FeaturizerConfig) -> SparseVector {
    let mut v = bucket_counts(text, config);
    let norm = v.norm();
    if norm > 0.0 {
        v.values.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub k: usize,
    pub d: usize,
    /// Row-major K×D.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self { k, d, weights: vec![0.0; k * d], bias: vec![0.0; k] }
    }

    pub fn weight(&self, class: usize, feature: usize) -> f64 {
        self.weights[class * self.d + feature]
    }

    fn check_dim(&self, x: &SparseVector) -> Result<(), ModelError> {
        if x.dim != self.d || x.indices.last().is_some_and(|&i| i >= self.d) {
            return Err(ModelError::ShapeMismatch(format!("feature dim {} vs model dim {}", x.dim, self.d)));
        }
        Ok(())
    }

    pub fn logits(&self, x: &SparseVector) -> Result<Vec<f64>, ModelError> {
        self.check_dim(x)?;
        Ok((0..self.k)
            .map(|c| {
                let row = &self.weights[c * self.d..(c + 1) * self.d];
                self.bias[c] + x.iter().map(|(i, v)| row[i] * v).sum::<f64>()
            })
            .collect())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    values.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

pub fn predict(model: &LinearModel, x: &SparseVector) -> Result<(usize, Vec<f64>), ModelError> {
    let probs = softmax(&model.logits(x)?);
    Ok((argmax(&probs), probs))
}

fn check_batch(model: &LinearModel, batch: &[(SparseVector, usize)]) -> Result<(), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    for (x, y) in batch {
        model.check_dim(x)?;
        if *y >= model.k {
            return Err(ModelError::LabelOutOfRange(*y));
        }
    }
    Ok(())
}

/// Average cross-entropy plus (l2/2)·‖W‖². The bias is not penalized.
pub fn loss(model: &LinearModel, batch: &[(SparseVector, usize)], l2: f64) -> Result<f64, ModelError> {
    check_batch(model, batch)?;
    let mut total = 0.0;
    for (x, y) in batch {
        let z = model.logits(x)?;
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - z[*y];
    }
    let penalty = 0.5 * l2 * model.weights.iter().map(|w| w * w).sum::<f64>();
    Ok(total / batch.len() as f64 + penalty)
}

/// Analytic gradient of [`loss`] with respect to (W, b).
pub fn gradient(
    model: &LinearModel,
    batch: &[(SparseVector, usize)],
    l2: f64,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    check_batch(model, batch)?;
    let n = batch.len() as f64;
    let mut grad_w: Vec<f64> = model.weights.iter().map(|w| l2 * w).collect();
    let mut grad_b = vec![0.0; model.k];
    for (x, y) in batch {
        let p = softmax(&model.logits(x)?);
        for c in 0..model.k {
            let g = (p[c] - f64::from(u8::from(c == *y))) / n;
            grad_b[c] += g;
            for (i, v) in x.iter() {
                grad_w[c * model.d + i] += g * v;
            }
        }
    }
    Ok((grad_w, grad_b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub shuffle: bool,
    /// Perturbations applied to training records before featurization
    /// (robust-training baseline). Applied by the caller; evaluation inputs
    /// never see them.
    #[serde(default)]
    pub train_time_perturbation: Vec<PerturbationSpec>,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 5, learning_rate: 0.5, l2: 0.0, seed: 0, shuffle: true, train_time_perturbation: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

pub fn train(
    features: &[SparseVector],
    labels: &[usize],
    k: usize,
    config: &TrainConfig,
) -> Result<(LinearModel, TrainReport), ModelError> {
    if features.len() != labels.len() {
        return Err(ModelError::ShapeMismatch(format!("{} feature rows vs {} labels", features.len(), labels.len())));
    }
    if features.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if features.len() < k {
        return Err(ModelError::TooFewExamples { n: features.len(), k });
    }
    if !(config.learning_rate > 0.0) || !(config.l2 >= 0.0) || config.learning_rate * config.l2 >= 1.0 {
        return Err(ModelError::InvalidConfig("need learning_rate > 0, l2 ≥ 0 and learning_rate·l2 < 1".into()));
    }
    let d = features[0].dim;
    let mut model = LinearModel::zeros(k, d);
    let batch: Vec<(SparseVector, usize)> = features.iter().cloned().zip(labels.iter().copied()).collect();
    check_batch(&model, &batch)?;

    let lr = config.learning_rate;
    let decay = 1.0 - lr * config.l2;
    let mut scale = 1.0;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for &i in &order {
            let (x, y) = &batch[i];
            let logits: Vec<f64> = (0..k)
                .map(|c| {
                    let row = &model.weights[c * d..(c + 1) * d];
                    model.bias[c] + scale * x.iter().map(|(j, v)| row[j] * v).sum::<f64>()
                })
                .collect();
            let p = softmax(&logits);
            scale *= decay;
            for c in 0..k {
                let g = p[c] - f64::from(u8::from(c == *y));
                model.bias[c] -= lr * g;
                let step = lr * g / scale;
                for (j, v) in x.iter() {
                    model.weights[c * d + j] -= step * v;
                }
            }
            if scale < 1e-9 {
                model.weights.iter_mut().for_each(|w| *w *= scale);
                scale = 1.0;
            }
        }
        if scale != 1.0 {
            model.weights.iter_mut().for_each(|w| *w *= scale);
            scale = 1.0;
        }
        epoch_losses.push(loss(&model, &batch, config.l2)?);
    }
    Ok((model, TrainReport { epoch_losses }))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, ModelError> {
    if predictions.len() != labels.len() {
        return Err(ModelError::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(ModelError::Empty);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// On-disk model: nonzero weights as (class, feature, value) triples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub k: usize,
    pub d: usize,
    pub featurizer: FeaturizerConfig,
    pub weights: Vec<(usize, usize, f64)>,
    pub bias: Vec<f64>,
    pub content_hash: String,
}

impl Checkpoint {
    pub fn new(model: &LinearModel, featurizer: &FeaturizerConfig) -> Self {
        let weights = model
            .weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, &w)| (i / model.d, i % model.d, w))
            .collect();
        let mut ckpt = Self {
            k: model.k,
            d: model.d,
            featurizer: featurizer.clone(),
            weights,
            bias: model.bias.clone(),
            content_hash: String::new(),
        };
        ckpt.content_hash = ckpt.compute_hash();
        ckpt
    }

    fn compute_hash(&self) -> String {
        let body =
            serde_json::to_vec(&(self.k, self.d, &self.featurizer, &self.weights, &self.bias)).expect("serializes");
        hex::encode(Sha256::digest(body))
    }

    pub fn model(&self) -> Result<LinearModel, ModelError> {
        if self.compute_hash() != self.content_hash {
            return Err(ModelError::ChecksumMismatch);
        }
        let mut model = LinearModel::zeros(self.k, self.d);
        for &(c, j, w) in &self.weights {
            if c >= self.k || j >= self.d {
                return Err(ModelError::ShapeMismatch(format!("weight ({c}, {j}) outside {}×{}", self.k, self.d)));
            }
            model.weights[c * self.d + j] = w;
        }
        if self.bias.len() != self.k {
            return Err(ModelError::ShapeMismatch("bias length".into()));
        }
        model.bias = self.bias.clone();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FeaturizerConfig {
        FeaturizerConfig { hash_dim: 16, lowercase: true }
    }

    #[test]
    fn featurize_empty_and_counts() {
        assert_eq!(featurize("", &small()), SparseVector::zeros(16));
        let counts = bucket_counts("dog dog cat", &FeaturizerConfig::default());
        assert!(counts.nnz() <= 2);
        let mut vals = counts.values.clone();
        vals.sort_by(f64::total_cmp);
        assert_eq!(vals, [1.0, 2.0]);
        let v = featurize("Dog dog CAT", &FeaturizerConfig::default());
        assert!((v.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn featurizer_config_validation() {
        assert!(FeaturizerConfig { hash_dim: 1, lowercase: true }.validate().is_err());
        assert!(FeaturizerConfig { hash_dim: 24, lowercase: true }.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = LinearModel::zeros(4, 16);
        let (class, probs) = predict(&m, &featurize("anything at all", &small())).unwrap();
        assert_eq!(class, 0);
        assert!(probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
        assert!(matches!(predict(&m, &SparseVector::zeros(8)), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn softmax_shift_invariance() {
        let z = [0.3, -1.2, 4.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.4).collect();
        for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((softmax(&z).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    }

    #[test]
    fn epochs_zero_gives_zero_model() {
        let xs = vec![featurize("a", &small()), featurize("b", &small())];
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (m, report) = train(&xs, &[0, 1], 2, &cfg).unwrap();
        assert_eq!(m, LinearModel::zeros(2, 16));
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn training_errors() {
        let xs = vec![featurize("a", &small())];
        let cfg = TrainConfig::default();
        assert!(matches!(train(&xs, &[0, 1], 2, &cfg), Err(ModelError::ShapeMismatch(_))));
        assert!(matches!(train(&[], &[], 2, &cfg), Err(ModelError::EmptyDataset)));
        assert!(matches!(train(&xs, &[0], 2, &cfg), Err(ModelError::TooFewExamples { .. })));
        let xs2 = vec![featurize("a", &small()), featurize("b", &small())];
        assert!(matches!(train(&xs2, &[0, 2], 2, &cfg), Err(ModelError::LabelOutOfRange(2))));
    }

    #[test]
    fn saturated_example_has_zero_logit_gradient() {
        let mut m = LinearModel::zeros(3, 4);
        m.bias = vec![800.0, 0.0, 0.0];
        let x = SparseVector::from_pairs(4, vec![(1, 1.0)]);
        let (gw, gb) = gradient(&m, &[(x, 0)], 0.0).unwrap();
        assert!(gb.iter().all(|g| g.abs() < 1e-300));
        assert!(gw.iter().all(|g| g.abs() < 1e-300));
    }

    #[test]
    fn l2_shifts_gradient_by_weights() {
        let mut m = LinearModel::zeros(2, 4);
        m.weights = vec![0.5, -1.0, 2.0, 0.0, 0.25, 0.0, -3.0, 1.0];
        let batch = vec![(SparseVector::from_pairs(4, vec![(0, 1.0), (2, 0.5)]), 1)];
        let (g0, b0) = gradient(&m, &batch, 0.0).unwrap();
        let (g1, b1) = gradient(&m, &batch, 1.0).unwrap();
        for i in 0..8 {
            assert_eq!(g1[i] - g0[i], m.weights[i]);
        }
        assert_eq!(b0, b1);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 1, 1, 0, 0, 0, 0, 0], &[1, 1, 1, 1, 1, 1, 1, 1]).unwrap(), 0.375);
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(ModelError::LengthMismatch(1, 2))));
        assert!(matches!(accuracy(&[], &[]), Err(ModelError::Empty)));
    }

    #[test]
    fn checkpoint_round_trip_and_tamper() {
        let cfg = small();
        let xs = vec![featurize("alpha beta", &cfg), featurize("gamma", &cfg)];
        let (m, _) = train(&xs, &[0, 1], 2, &TrainConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        Checkpoint::new(&m, &cfg).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.model().unwrap(), m);
        let mut bad = loaded;
        bad.bias[0] += 1.0;
        assert!(matches!(bad.model(), Err(ModelError::ChecksumMismatch)));
    }
}
