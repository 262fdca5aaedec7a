//! The segmentation model stack: subset sampling, per-subset training,
//! tiled whole-image prediction and ingestion of externally predicted masks.

pub mod features;
mod reference;

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::features::{compute_features, PatchFeatures, FEATURE_COUNT};
use self::reference::{fit_pool, PixelPool};
pub use self::reference::{
    train_reference_segmenter, train_reference_segmenter_traced, ReferenceSegmenter, TrainConfig, TrainingReport,
};
use crate::error::{Error, Result};
use crate::fusion::MaskGrid;
use crate::image::{load_mask, BinaryMask, ProbabilityMap, RgbImage};
use crate::rng::{derive_seed, keyed_rng};
use crate::tiling::{extract_mask_patch, extract_patch, merge_tiles, plan_tiles, DEFAULT_OVERLAP, DEFAULT_PATCH_SIZE};

pub const DEFAULT_FRACTION: f64 = 2.0 / 3.0;

/// Which training rows each ensemble member sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetPlan {
    pub n: usize,
    pub dataset_size: usize,
    pub fraction: f64,
    pub subsets: Vec<Vec<usize>>,
    pub master_seed: u64,
}

impl SubsetPlan {
    pub fn subset_size(&self) -> usize {
        self.subsets.first().map_or(0, Vec::len)
    }
}

/// Draw `n` subsets of `floor(fraction * N)` distinct indices each, without
/// replacement, every subset from its own keyed stream.
pub fn sample_subsets(dataset_size: usize, n: usize, fraction: f64, master_seed: u64) -> Result<SubsetPlan> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subset fraction {fraction} must lie in (0, 1]")));
    }
    // tolerate representation error such as 2/3 * 1356 = 903.9999...
    let size = (fraction * dataset_size as f64 + 1e-9).floor() as usize;
    if size == 0 {
        return Err(Error::Config(format!("fraction {fraction} of {dataset_size} images leaves an empty subset")));
    }
    if n == 0 {
        return Err(Error::Config("ensemble size must be at least 1".into()));
    }
    let subsets = (0..n)
        .map(|q| {
            let mut rng = keyed_rng(master_seed, q as u64, "subset");
            let mut idx = sample(&mut rng, dataset_size, size).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    Ok(SubsetPlan { n, dataset_size, fraction, subsets, master_seed })
}

/// Provenance carried by every trained segmenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterMeta {
    pub seed: u64,
    pub subset_id: Option<usize>,
    /// Mean validation Dice of the selected checkpoint.
    pub val_dsc: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

/// Anything that maps an image patch to a same-size foreground probability
/// raster. Implementations must be deterministic.
pub trait Segmenter: Send + Sync {
    fn predict_proba(&self, patch: &RgbImage) -> ProbabilityMap;

    fn meta(&self) -> &SegmenterMeta;

    /// Lets the stack share patch features across reference models.
    fn as_reference(&self) -> Option<&ReferenceSegmenter> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub patch_size: usize,
    pub overlap: usize,
    pub threshold: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { patch_size: DEFAULT_PATCH_SIZE, overlap: DEFAULT_OVERLAP, threshold: 0.5 }
    }
}

/// Tile, predict every patch, threshold, and AND-merge.
pub fn predict_image(model: &dyn Segmenter, image: &RgbImage, config: &PredictConfig) -> Result<BinaryMask> {
    let grid = plan_tiles(image.width(), image.height(), config.patch_size, config.overlap)?;
    let masks = (0..grid.len())
        .map(|i| {
            let patch = extract_patch(image, &grid, i)?;
            Ok(model.predict_proba(&patch).threshold(config.threshold as f32))
        })
        .collect::<Result<Vec<_>>>()?;
    merge_tiles(&masks, &grid)
}

/// Predict with several models at once; equals calling [`predict_image`]
/// per model, but computes patch features once when every model is a
/// [`ReferenceSegmenter`].
pub fn predict_image_many(
    models: &[&dyn Segmenter],
    image: &RgbImage,
    config: &PredictConfig,
) -> Result<Vec<BinaryMask>> {
    let refs: Option<Vec<&ReferenceSegmenter>> = models.iter().map(|m| m.as_reference()).collect();
    let Some(refs) = refs else {
        return models.iter().map(|m| predict_image(*m, image, config)).collect();
    };
    let grid = plan_tiles(image.width(), image.height(), config.patch_size, config.overlap)?;
    let mut per_model: Vec<Vec<BinaryMask>> = vec![Vec::with_capacity(grid.len()); refs.len()];
    for i in 0..grid.len() {
        let features = compute_features(&extract_patch(image, &grid, i)?);
        for (out, model) in per_model.iter_mut().zip(&refs) {
            out.push(model.predict_features(&features).threshold(config.threshold as f32));
        }
    }
    per_model.iter().map(|masks| merge_tiles(masks, &grid)).collect()
}

/// Trained ensemble members with the plan that produced them.
#[derive(Clone, Debug)]
pub struct ModelStack {
    pub models: Vec<ReferenceSegmenter>,
    pub plan: SubsetPlan,
    pub selection_scores: Vec<f64>,
}

impl ModelStack {
    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn segmenters(&self) -> Vec<&dyn Segmenter> {
        self.models.iter().map(|m| m as &dyn Segmenter).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let plan_path = dir.join("plan.json");
        let text = serde_json::to_string_pretty(&self.plan).expect("plan serializes");
        fs::write(&plan_path, text).map_err(|e| Error::io(&plan_path, e))?;
        for (q, m) in self.models.iter().enumerate() {
            m.save(dir.join(format!("model_{q}.bin")), dir.join(format!("model_{q}.json")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let plan_path = dir.join("plan.json");
        if !plan_path.exists() {
            return Err(Error::MissingArtifact(format!("stack plan {}", plan_path.display())));
        }
        let text = fs::read_to_string(&plan_path).map_err(|e| Error::io(&plan_path, e))?;
        let plan: SubsetPlan =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: plan_path.clone(), source })?;
        let models = (0..plan.n)
            .map(|q| ReferenceSegmenter::load(dir.join(format!("model_{q}.bin")), dir.join(format!("model_{q}.json"))))
            .collect::<Result<Vec<_>>>()?;
        let selection_scores = models.iter().map(|m| m.meta().val_dsc).collect();
        Ok(Self { models, plan, selection_scores })
    }
}

fn tile_pairs(set: &[(RgbImage, BinaryMask)], hyper: &TrainConfig) -> Result<Vec<Vec<(RgbImage, BinaryMask)>>> {
    set.iter()
        .map(|(img, mask)| {
            if img.dims() != mask.dims() {
                return Err(Error::Dimensions(format!("image {:?} with mask {:?}", img.dims(), mask.dims())));
            }
            let grid = plan_tiles(img.width(), img.height(), hyper.patch_size, hyper.overlap)?;
            (0..grid.len()).map(|i| Ok((extract_patch(img, &grid, i)?, extract_mask_patch(mask, &grid, i)?))).collect()
        })
        .collect()
}

/// Train one reference segmenter per subset. Images are tiled into
/// training patches; pixel samples are drawn once and shared by all members.
pub fn train_stack(
    dataset: &[(RgbImage, BinaryMask)],
    val: &[(RgbImage, BinaryMask)],
    plan: &SubsetPlan,
    hyper: &TrainConfig,
) -> Result<ModelStack> {
    Ok(train_stacks(dataset, val, &[plan], hyper)?.remove(0))
}

/// [`train_stack`] for several plans over the same data, sharing one pixel
/// sample drawn with the first plan's seed.
pub fn train_stacks(
    dataset: &[(RgbImage, BinaryMask)],
    val: &[(RgbImage, BinaryMask)],
    plans: &[&SubsetPlan],
    hyper: &TrainConfig,
) -> Result<Vec<ModelStack>> {
    let Some(first) = plans.first() else {
        return Ok(Vec::new());
    };
    for plan in plans {
        if plan.dataset_size != dataset.len() {
            return Err(Error::Config(format!(
                "plan was drawn for {} images, dataset has {}",
                plan.dataset_size,
                dataset.len()
            )));
        }
    }
    if dataset.is_empty() || val.is_empty() {
        return Err(Error::Training("empty training or validation set".into()));
    }
    let train_tiles = tile_pairs(dataset, hyper)?;
    let val_tiles = tile_pairs(val, hyper)?;
    let pool_seed = first.master_seed;

    let pool_of = |tiles: &[Vec<(RgbImage, BinaryMask)>], per_patch: usize, purpose: &str| {
        let flat: Vec<(usize, &(RgbImage, BinaryMask))> = tiles.iter().flatten().enumerate().collect();
        let parts: Vec<PixelPool> = flat
            .par_iter()
            .map(|(k, (img, mask))| {
                let mut p = PixelPool::default();
                p.push_patch(img, mask, per_patch, derive_seed(pool_seed, *k as u64, purpose));
                p
            })
            .collect();
        let mut pool = PixelPool::default();
        for p in parts {
            let offset = pool.rows();
            pool.features.extend(p.features);
            pool.labels.extend(p.labels);
            pool.patches.extend(p.patches.into_iter().map(|r| r.start + offset..r.end + offset));
        }
        pool
    };
    let train_pool = pool_of(&train_tiles, hyper.pixels_per_patch, "train-pixels");
    let val_pool = pool_of(&val_tiles, hyper.val_pixels_per_patch, "val-pixels");

    let mut first_patch = Vec::with_capacity(train_tiles.len());
    let mut acc = 0;
    for t in &train_tiles {
        first_patch.push(acc);
        acc += t.len();
    }

    plans
        .iter()
        .map(|plan| {
            let trained = (0..plan.n)
                .into_par_iter()
                .map(|q| {
                    let patch_ids: Vec<usize> = plan.subsets[q]
                        .iter()
                        .flat_map(|&img| first_patch[img]..first_patch[img] + train_tiles[img].len())
                        .collect();
                    let seed = derive_seed(plan.master_seed, q as u64, "train");
                    fit_pool(&train_pool, &patch_ids, &val_pool, seed, Some(q), hyper).map(|(m, _)| m)
                })
                .collect::<Result<Vec<_>>>()?;
            let selection_scores = trained.iter().map(|m| m.meta().val_dsc).collect();
            Ok(ModelStack { models: trained, plan: (*plan).clone(), selection_scores })
        })
        .collect()
}

pub fn grid_mask_name(stain: usize, model: usize) -> String {
    format!("stain{stain}_model{model}.png")
}

/// Load `stain{p}_model{q}.png` for every `p < stains`, `q < models`.
pub fn ingest_external_masks(dir: impl AsRef<Path>, stains: usize, models: usize) -> Result<MaskGrid> {
    let dir = dir.as_ref();
    let mut masks = Vec::with_capacity(stains * models);
    let mut dims = None;
    for p in 0..stains {
        for q in 0..models {
            let name = grid_mask_name(p, q);
            let path = dir.join(&name);
            if !path.exists() {
                return Err(Error::MissingArtifact(format!("{name} in {}", dir.display())));
            }
            let mask = load_mask(&path)?;
            match dims {
                None => dims = Some(mask.dims()),
                Some(d) if d != mask.dims() => {
                    return Err(Error::Dimensions(format!("{name} is {:?}, expected {d:?}", mask.dims())));
                }
                _ => {}
            }
            masks.push(mask);
        }
    }
    MaskGrid::new(stains, models, masks)
}

/// Infer the grid shape from the `stain{p}_model{q}.png` names in `dir`.
pub fn discover_grid_shape(dir: impl AsRef<Path>) -> Result<(usize, usize)> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let (mut stains, mut models) = (0, 0);
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(rest) = name.strip_prefix("stain").and_then(|r| r.strip_suffix(".png")) else {
            continue;
        };
        let Some((p, q)) = rest.split_once("_model") else {
            continue;
        };
        if let (Ok(p), Ok(q)) = (p.parse::<usize>(), q.parse::<usize>()) {
            stains = stains.max(p + 1);
            models = models.max(q + 1);
        }
    }
    if stains == 0 {
        return Err(Error::MissingArtifact(format!("no stain*_model*.png masks in {}", dir.display())));
    }
    Ok((stains, models))
}
