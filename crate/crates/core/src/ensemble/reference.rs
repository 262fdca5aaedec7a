//! The built-in weak learner: a per-pixel logistic classifier over
//! handcrafted multiscale color features, trained by mini-batch SGD with
//! validation-Dice checkpoint selection.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{compute_features, PatchFeatures, FEATURE_COUNT, LOCAL_WINDOW, SIGMAS};
use super::{Segmenter, SegmenterMeta};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, ProbabilityMap, RgbImage};
use crate::rng::{derive_seed, keyed_rng};
use crate::tiling::{DEFAULT_OVERLAP, DEFAULT_PATCH_SIZE};

/// Training hyperparameters of the reference segmenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2: f64,
    /// Training pixels sampled (once, seeded) from every training patch.
    pub pixels_per_patch: usize,
    /// Validation pixels sampled from every validation patch; all pixels
    /// are used when this is at least the patch area.
    pub val_pixels_per_patch: usize,
    pub threshold: f64,
    pub patch_size: usize,
    pub overlap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            patience: 5,
            learning_rate: 0.05,
            batch_size: 256,
            l2: 1e-4,
            pixels_per_patch: 1024,
            val_pixels_per_patch: 4096,
            threshold: 0.5,
            patch_size: DEFAULT_PATCH_SIZE,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

/// Sampled pixels of a set of patches, with labels, grouped by patch.
#[derive(Clone, Debug, Default)]
pub(crate) struct PixelPool {
    pub features: Vec<f32>,
    pub labels: Vec<u8>,
    /// Row range of each patch.
    pub patches: Vec<std::ops::Range<usize>>,
}

impl PixelPool {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * FEATURE_COUNT..(i + 1) * FEATURE_COUNT]
    }

    /// Add `count` pixels of one patch, sampled with the given seed.
    pub fn push_patch(&mut self, image: &RgbImage, mask: &BinaryMask, count: usize, seed: u64) {
        let feats = compute_features(image);
        let n = feats.pixel_count();
        let idx: Vec<usize> = if count >= n {
            (0..n).collect()
        } else {
            let mut rng = keyed_rng(seed, 0, "pixels");
            let mut v = sample(&mut rng, n, count).into_vec();
            v.sort_unstable();
            v
        };
        let start = self.rows();
        for i in idx {
            self.features.extend_from_slice(feats.pixel(i));
            self.labels.push(mask.data()[i]);
        }
        self.patches.push(start..self.rows());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_val_dsc: Vec<f64>,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSegmenter {
    weights: Vec<f64>,
    bias: f64,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
    meta: SegmenterMeta,
    // standardization folded into the linear map
    eff_weights: Vec<f32>,
    eff_bias: f32,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    feature_count: usize,
    sigmas: Vec<f32>,
    local_window: usize,
    layout: String,
    #[serde(flatten)]
    meta: SegmenterMeta,
}

const LAYOUT: &str = "weights[feature_count], bias, mean[feature_count], std[feature_count]; f64 little-endian";

impl ReferenceSegmenter {
    fn from_parts(
        weights: Vec<f64>,
        bias: f64,
        feature_mean: Vec<f64>,
        feature_std: Vec<f64>,
        meta: SegmenterMeta,
    ) -> Self {
        let eff_weights: Vec<f32> = weights.iter().zip(&feature_std).map(|(w, s)| (w / s) as f32).collect();
        let eff_bias = (bias
            - weights.iter().zip(&feature_mean).zip(&feature_std).map(|((w, m), s)| w * m / s).sum::<f64>())
            as f32;
        Self { weights, bias, feature_mean, feature_std, meta, eff_weights, eff_bias }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    #[inline]
    fn logit(&self, x: &[f32]) -> f32 {
        let mut z = self.eff_bias;
        for (w, v) in self.eff_weights.iter().zip(x) {
            z += w * v;
        }
        z
    }

    pub fn predict_features(&self, features: &PatchFeatures) -> ProbabilityMap {
        let data = (0..features.pixel_count()).map(|i| sigmoid(self.logit(features.pixel(i)))).collect();
        ProbabilityMap { width: features.width, height: features.height, data }
    }

    pub fn save(&self, bin_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
        let (bin_path, json_path) = (bin_path.as_ref(), json_path.as_ref());
        let mut bytes = Vec::with_capacity((3 * FEATURE_COUNT + 1) * 8);
        for v in
            self.weights.iter().chain(std::iter::once(&self.bias)).chain(&self.feature_mean).chain(&self.feature_std)
        {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(bin_path, bytes).map_err(|e| Error::io(bin_path, e))?;
        let sidecar = Sidecar {
            feature_count: FEATURE_COUNT,
            sigmas: SIGMAS.to_vec(),
            local_window: LOCAL_WINDOW,
            layout: LAYOUT.into(),
            meta: self.meta.clone(),
        };
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(json_path, text).map_err(|e| Error::io(json_path, e))
    }

    pub fn load(bin_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<Self> {
        let (bin_path, json_path) = (bin_path.as_ref(), json_path.as_ref());
        let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: json_path.to_path_buf(), source })?;
        if sidecar.feature_count != FEATURE_COUNT || sidecar.sigmas != SIGMAS || sidecar.local_window != LOCAL_WINDOW {
            return Err(Error::Config(format!(
                "{} describes an incompatible feature configuration",
                json_path.display()
            )));
        }
        let bytes = fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
        let expected = (3 * FEATURE_COUNT + 1) * 8;
        if bytes.len() != expected {
            return Err(Error::Decode {
                path: bin_path.to_path_buf(),
                reason: format!("expected {expected} bytes of weights, found {}", bytes.len()),
            });
        }
        let vals: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let f = FEATURE_COUNT;
        Ok(Self::from_parts(
            vals[..f].to_vec(),
            vals[f],
            vals[f + 1..2 * f + 1].to_vec(),
            vals[2 * f + 1..].to_vec(),
            sidecar.meta,
        ))
    }
}

impl Segmenter for ReferenceSegmenter {
    fn predict_proba(&self, patch: &RgbImage) -> ProbabilityMap {
        self.predict_features(&compute_features(patch))
    }

    fn meta(&self) -> &SegmenterMeta {
        &self.meta
    }

    fn as_reference(&self) -> Option<&ReferenceSegmenter> {
        Some(self)
    }
}

#[inline]
fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

fn check_patches(set: &[(RgbImage, BinaryMask)], what: &str, patch: usize) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Training(format!("empty {what} set")));
    }
    for (i, (img, mask)) in set.iter().enumerate() {
        if img.dims() != (patch, patch) || mask.dims() != (patch, patch) {
            return Err(Error::Training(format!(
                "{what} patch {i} is {:?} with mask {:?}, expected {patch}x{patch}",
                img.dims(),
                mask.dims()
            )));
        }
    }
    Ok(())
}

/// Train on patch pairs, keeping the weights of the epoch with the best
/// mean validation Dice.
pub fn train_reference_segmenter(
    train_patches: &[(RgbImage, BinaryMask)],
    val_patches: &[(RgbImage, BinaryMask)],
    seed: u64,
    hyper: &TrainConfig,
) -> Result<ReferenceSegmenter> {
    train_reference_segmenter_traced(train_patches, val_patches, seed, hyper).map(|(s, _)| s)
}

pub fn train_reference_segmenter_traced(
    train_patches: &[(RgbImage, BinaryMask)],
    val_patches: &[(RgbImage, BinaryMask)],
    seed: u64,
    hyper: &TrainConfig,
) -> Result<(ReferenceSegmenter, TrainingReport)> {
    check_patches(train_patches, "training", hyper.patch_size)?;
    check_patches(val_patches, "validation", hyper.patch_size)?;
    let mut train = PixelPool::default();
    for (i, (img, mask)) in train_patches.iter().enumerate() {
        train.push_patch(img, mask, hyper.pixels_per_patch, derive_seed(seed, i as u64, "train-pixels"));
    }
    let mut val = PixelPool::default();
    for (i, (img, mask)) in val_patches.iter().enumerate() {
        val.push_patch(img, mask, hyper.val_pixels_per_patch, derive_seed(seed, i as u64, "val-pixels"));
    }
    let all: Vec<usize> = (0..train.patches.len()).collect();
    fit_pool(&train, &all, &val, seed, None, hyper)
}

/// Mean per-patch Dice of thresholded predictions on the validation pool.
fn validation_dsc(val: &PixelPool, model: &ReferenceSegmenter, threshold: f32) -> f64 {
    let total: f64 = val
        .patches
        .iter()
        .map(|range| {
            let (mut inter, mut sum) = (0u64, 0u64);
            for i in range.clone() {
                let p = u64::from(sigmoid(model.logit(val.row(i))) >= threshold);
                let g = u64::from(val.labels[i]);
                inter += p & g;
                sum += p + g;
            }
            if sum == 0 {
                1.0
            } else {
                2.0 * inter as f64 / sum as f64
            }
        })
        .sum();
    total / val.patches.len() as f64
}

/// SGD on the rows of the selected training patches.
pub(crate) fn fit_pool(
    train: &PixelPool,
    patch_ids: &[usize],
    val: &PixelPool,
    seed: u64,
    subset_id: Option<usize>,
    hyper: &TrainConfig,
) -> Result<(ReferenceSegmenter, TrainingReport)> {
    let rows: Vec<usize> = patch_ids.iter().flat_map(|&p| train.patches[p].clone()).collect();
    if rows.is_empty() {
        return Err(Error::Training("no training pixels".into()));
    }
    if hyper.batch_size == 0 || hyper.max_epochs == 0 {
        return Err(Error::Config("batch size and epoch count must be positive".into()));
    }
    let f = FEATURE_COUNT;
    let mut mean = vec![0.0f64; f];
    let mut sq = vec![0.0f64; f];
    for &r in &rows {
        for (k, &v) in train.row(r).iter().enumerate() {
            mean[k] += v as f64;
            sq[k] += (v as f64) * (v as f64);
        }
    }
    let n = rows.len() as f64;
    let std: Vec<f64> = (0..f)
        .map(|k| {
            mean[k] /= n;
            let s = (sq[k] / n - mean[k] * mean[k]).max(0.0).sqrt();
            if s < 1e-6 {
                1.0
            } else {
                s
            }
        })
        .collect();

    let mut rng = keyed_rng(seed, 0, "sgd");
    let mut w: Vec<f64> = (0..f).map(|_| rng.random_range(-0.01..0.01)).collect();
    let mut b = 0.0f64;
    let meta = |val_dsc: f64, epochs: usize, best: usize| SegmenterMeta {
        seed,
        subset_id,
        val_dsc,
        epochs_run: epochs,
        best_epoch: best,
    };

    let mut order = rows.clone();
    let mut x = vec![0.0f64; f];
    let mut grad = vec![0.0f64; f];
    let mut report = TrainingReport { epoch_loss: Vec::new(), epoch_val_dsc: Vec::new(), best_epoch: 0 };
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let mut since_best = 0;
    let lr = hyper.learning_rate;
    for epoch in 1..=hyper.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for &r in batch {
                let raw = train.row(r);
                let mut z = b;
                for k in 0..f {
                    x[k] = (raw[k] as f64 - mean[k]) / std[k];
                    z += w[k] * x[k];
                }
                let y = f64::from(train.labels[r]);
                // log(1 + e^z) - y z, computed stably
                loss_sum += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
                let err = 1.0 / (1.0 + (-z).exp()) - y;
                for k in 0..f {
                    grad[k] += err * x[k];
                }
                grad_b += err;
            }
            let scale = 1.0 / batch.len() as f64;
            for k in 0..f {
                w[k] -= lr * (grad[k] * scale + hyper.l2 * w[k]);
            }
            b -= lr * grad_b * scale;
        }
        let loss = loss_sum / n;
        if !loss.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
        }
        report.epoch_loss.push(loss);
        let candidate = ReferenceSegmenter::from_parts(w.clone(), b, mean.clone(), std.clone(), meta(0.0, 0, 0));
        let dsc = validation_dsc(val, &candidate, hyper.threshold as f32);
        report.epoch_val_dsc.push(dsc);
        if best.as_ref().is_none_or(|(d, _, _)| dsc > *d) {
            best = Some((dsc, w.clone(), b));
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                break;
            }
        }
    }
    let (dsc, w, b) = best.expect("at least one epoch ran");
    let epochs = report.epoch_loss.len();
    Ok((ReferenceSegmenter::from_parts(w, b, mean, std, meta(dsc, epochs, report.best_epoch)), report))
}
