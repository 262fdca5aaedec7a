use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{ResultRow, ResultTable};
use super::Sample;
use crate::ensemble::{discover_grid_shape, grid_mask_name, predict_image_many, PredictConfig, Segmenter};
use crate::error::{Error, Result};
use crate::fusion::{majority_vote, MaskGrid, Topology};
use crate::image::{load_mask, BinaryMask, RgbImage};
use crate::metrics::{dsc, object_f1, DEFAULT_IOU_THRESHOLD};
use crate::rng::keyed_rng;

/// One row of the experiment matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExperimentKind {
    /// The model trained on the whole training set, original stain.
    Benchmark,
    /// The `k`-th model (1-based) of the seed-keyed model order, original
    /// stain.
    SingleModel(usize),
    /// Majority vote of the first `n` models, original stain only.
    Beds(usize),
    ModelStain(usize),
    StainModel(usize),
    All(usize),
}

/// Fusion strategies swept over the ensemble size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Beds,
    ModelStain,
    StainModel,
    All,
}

impl Strategy {
    pub const EVERY: [Strategy; 4] = [Strategy::Beds, Strategy::ModelStain, Strategy::StainModel, Strategy::All];

    pub fn kind(self, n: usize) -> ExperimentKind {
        match self {
            Strategy::Beds => ExperimentKind::Beds(n),
            Strategy::ModelStain => ExperimentKind::ModelStain(n),
            Strategy::StainModel => ExperimentKind::StainModel(n),
            Strategy::All => ExperimentKind::All(n),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Beds => "beds",
            Strategy::ModelStain => "model-stain",
            Strategy::StainModel => "stain-model",
            Strategy::All => "all",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::EVERY
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

impl ExperimentKind {
    /// `(n, strategy)` for ensemble kinds.
    pub fn ensemble(self) -> Option<(usize, Strategy)> {
        match self {
            ExperimentKind::Beds(n) => Some((n, Strategy::Beds)),
            ExperimentKind::ModelStain(n) => Some((n, Strategy::ModelStain)),
            ExperimentKind::StainModel(n) => Some((n, Strategy::StainModel)),
            ExperimentKind::All(n) => Some((n, Strategy::All)),
            _ => None,
        }
    }

    /// Number of stack models the experiment reads.
    pub fn models_needed(self) -> usize {
        match self {
            ExperimentKind::Benchmark => 0,
            ExperimentKind::SingleModel(k) => k,
            other => other.ensemble().map_or(0, |(n, _)| n),
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ExperimentKind::Benchmark => write!(f, "benchmark"),
            ExperimentKind::SingleModel(k) => write!(f, "model-{k}"),
            ExperimentKind::Beds(n) => write!(f, "beds-{n}"),
            ExperimentKind::ModelStain(n) => write!(f, "beds-{n}-model-stain"),
            ExperimentKind::StainModel(n) => write!(f, "beds-{n}-stain-model"),
            ExperimentKind::All(n) => write!(f, "beds-{n}-all"),
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown experiment {s:?}"));
        let count = |t: &str| t.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(bad);
        if s == "benchmark" {
            return Ok(ExperimentKind::Benchmark);
        }
        if let Some(k) = s.strip_prefix("model-") {
            return Ok(ExperimentKind::SingleModel(count(k)?));
        }
        let rest = s.strip_prefix("beds-").ok_or_else(bad)?;
        match rest.split_once('-') {
            None => Ok(ExperimentKind::Beds(count(rest)?)),
            Some((n, strategy)) => Ok(strategy.parse::<Strategy>().map_err(|_| bad())?.kind(count(n)?)),
        }
    }
}

impl Serialize for ExperimentKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExperimentKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Keys the model order used by single-model and ensemble kinds.
    pub master_seed: u64,
    #[serde(default = "default_iou")]
    pub iou_threshold: f64,
}

fn default_iou() -> f64 {
    DEFAULT_IOU_THRESHOLD
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind, master_seed: u64) -> Self {
        Self { kind, master_seed, iou_threshold: DEFAULT_IOU_THRESHOLD }
    }
}

/// Seed-keyed order in which stack models enter experiments.
pub fn model_order(models: usize, master_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..models).collect();
    order.shuffle(&mut keyed_rng(master_seed, 0, "model-order"));
    order
}

/// Per-image (stain x model) masks plus ground truth, however obtained.
pub trait GridSource: Sync {
    fn image_ids(&self) -> &[String];
    fn ground_truth(&self, image: usize) -> &BinaryMask;
    fn stains(&self) -> usize;
    fn models(&self) -> usize;
    /// The sub-grid over the given stain and model indices.
    fn grid(&self, image: usize, stains: &[usize], models: &[usize]) -> Result<MaskGrid>;
    fn benchmark(&self, image: usize) -> Result<BinaryMask>;
}

/// Masks predicted on demand from stain variants and a model stack.
pub struct PredictedGrids<'a> {
    ids: Vec<String>,
    truth: Vec<BinaryMask>,
    /// `variants[i][p]`: image `i` under stain `p`, `p = 0` the original.
    variants: Vec<Vec<RgbImage>>,
    models: Vec<&'a dyn Segmenter>,
    benchmark: Option<&'a dyn Segmenter>,
    config: PredictConfig,
    cache: Option<Mutex<HashMap<usize, Arc<MaskGrid>>>>,
    predicted: AtomicUsize,
}

impl<'a> PredictedGrids<'a> {
    pub fn new(
        test: &[Sample],
        variants: Vec<Vec<RgbImage>>,
        models: Vec<&'a dyn Segmenter>,
        benchmark: Option<&'a dyn Segmenter>,
        config: PredictConfig,
    ) -> Result<Self> {
        if variants.len() != test.len() {
            return Err(Error::Config(format!(
                "{} stain variant lists for {} test images",
                variants.len(),
                test.len()
            )));
        }
        let stains = variants.first().map_or(0, Vec::len);
        for (s, v) in test.iter().zip(&variants) {
            if v.len() != stains || stains == 0 {
                return Err(Error::Config(format!("{}: {} stain variants, expected {stains}", s.id, v.len())));
            }
            if let Some(bad) = v.iter().find(|img| img.dims() != s.mask.dims()) {
                return Err(Error::Dimensions(format!("{}: variant {:?}, mask {:?}", s.id, bad.dims(), s.mask.dims())));
            }
        }
        Ok(Self {
            ids: test.iter().map(|s| s.id.clone()).collect(),
            truth: test.iter().map(|s| s.mask.clone()).collect(),
            variants,
            models,
            benchmark,
            config,
            cache: Some(Mutex::new(HashMap::new())),
            predicted: AtomicUsize::new(0),
        })
    }

    /// Disable the per-image grid cache; every request predicts afresh.
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    /// Total masks predicted so far, benchmark included.
    pub fn predictions(&self) -> usize {
        self.predicted.load(Ordering::Relaxed)
    }

    fn predict(&self, image: usize, stains: &[usize], models: &[usize]) -> Result<MaskGrid> {
        let chosen: Vec<&dyn Segmenter> = models.iter().map(|&q| self.models[q]).collect();
        let rows = stains
            .iter()
            .map(|&p| predict_image_many(&chosen, &self.variants[image][p], &self.config))
            .collect::<Result<Vec<_>>>()?;
        self.predicted.fetch_add(stains.len() * models.len(), Ordering::Relaxed);
        MaskGrid::from_rows(rows)
    }

    /// The full grid of one image, predicted once when caching.
    pub fn full_grid(&self, image: usize) -> Result<Arc<MaskGrid>> {
        let all_s: Vec<usize> = (0..self.stains()).collect();
        let all_q: Vec<usize> = (0..self.models()).collect();
        let Some(cache) = &self.cache else {
            return self.predict(image, &all_s, &all_q).map(Arc::new);
        };
        if let Some(g) = cache.lock().expect("cache lock").get(&image) {
            return Ok(Arc::clone(g));
        }
        let grid = Arc::new(self.predict(image, &all_s, &all_q)?);
        cache.lock().expect("cache lock").entry(image).or_insert_with(|| Arc::clone(&grid));
        Ok(grid)
    }

    fn check_indices(&self, image: usize, stains: &[usize], models: &[usize]) -> Result<()> {
        if image >= self.ids.len() {
            return Err(Error::IndexOutOfRange { index: image, len: self.ids.len() });
        }
        for &p in stains {
            if p >= self.stains() {
                return Err(Error::IndexOutOfRange { index: p, len: self.stains() });
            }
        }
        for &q in models {
            if q >= self.models() {
                return Err(Error::IndexOutOfRange { index: q, len: self.models() });
            }
        }
        Ok(())
    }
}

impl GridSource for PredictedGrids<'_> {
    fn image_ids(&self) -> &[String] {
        &self.ids
    }

    fn ground_truth(&self, image: usize) -> &BinaryMask {
        &self.truth[image]
    }

    fn stains(&self) -> usize {
        self.variants.first().map_or(0, Vec::len)
    }

    fn models(&self) -> usize {
        self.models.len()
    }

    fn grid(&self, image: usize, stains: &[usize], models: &[usize]) -> Result<MaskGrid> {
        self.check_indices(image, stains, models)?;
        if self.cache.is_some() {
            self.full_grid(image)?.select(stains, models)
        } else {
            self.predict(image, stains, models)
        }
    }

    fn benchmark(&self, image: usize) -> Result<BinaryMask> {
        let model = self.benchmark.ok_or_else(|| Error::MissingArtifact("benchmark model".into()))?;
        self.check_indices(image, &[], &[])?;
        self.predicted.fetch_add(1, Ordering::Relaxed);
        predict_image_many(&[model], &self.variants[image][0], &self.config).map(|mut v| v.remove(0))
    }
}

/// Masks read from `grid/<image_id>/stain{p}_model{q}.png`, with ground
/// truth from `<gt_dir>/<image_id>.png`. An optional `benchmark.png` beside
/// the grid masks serves the benchmark experiment.
pub struct ExternalGrids {
    root: PathBuf,
    ids: Vec<String>,
    truth: Vec<BinaryMask>,
    stains: usize,
    models: usize,
}

impl ExternalGrids {
    pub fn open(grid_root: impl AsRef<Path>, gt_dir: impl AsRef<Path>) -> Result<Self> {
        let root = grid_root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(Error::MissingArtifact(format!("grid directory {}", root.display())));
        }
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
            let entry = entry.map_err(|e| Error::io(&root, e))?;
            if entry.path().is_dir() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        let first =
            ids.first().ok_or_else(|| Error::MissingArtifact(format!("no image directories in {}", root.display())))?;
        let (stains, models) = discover_grid_shape(root.join(first))?;
        let gt_dir = gt_dir.as_ref();
        let truth = ids
            .iter()
            .map(|id| {
                let p = gt_dir.join(format!("{id}.png"));
                if !p.exists() {
                    return Err(Error::MissingArtifact(format!("ground truth {}", p.display())));
                }
                load_mask(p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { root, ids, truth, stains, models })
    }
}

impl GridSource for ExternalGrids {
    fn image_ids(&self) -> &[String] {
        &self.ids
    }

    fn ground_truth(&self, image: usize) -> &BinaryMask {
        &self.truth[image]
    }

    fn stains(&self) -> usize {
        self.stains
    }

    fn models(&self) -> usize {
        self.models
    }

    fn grid(&self, image: usize, stains: &[usize], models: &[usize]) -> Result<MaskGrid> {
        let dir = self.root.join(&self.ids[image]);
        let rows = stains
            .iter()
            .map(|&p| {
                models
                    .iter()
                    .map(|&q| {
                        let path = dir.join(grid_mask_name(p, q));
                        if !path.exists() {
                            return Err(Error::MissingArtifact(format!("{}", path.display())));
                        }
                        load_mask(path)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        MaskGrid::from_rows(rows)
    }

    fn benchmark(&self, image: usize) -> Result<BinaryMask> {
        let path = self.root.join(&self.ids[image]).join("benchmark.png");
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("benchmark mask {}", path.display())));
        }
        load_mask(path)
    }
}

fn fused_mask(source: &dyn GridSource, config: &ExperimentConfig, order: &[usize], image: usize) -> Result<BinaryMask> {
    match config.kind {
        ExperimentKind::Benchmark => source.benchmark(image),
        ExperimentKind::SingleModel(k) => {
            let g = source.grid(image, &[0], &[order[k - 1]])?;
            Ok(g.get(0, 0).clone())
        }
        ExperimentKind::Beds(n) => {
            let g = source.grid(image, &[0], &order[..n])?;
            majority_vote(g.masks())
        }
        kind => {
            let (n, strategy) = kind.ensemble().expect("ensemble kind");
            let stains: Vec<usize> = (0..source.stains()).collect();
            let g = source.grid(image, &stains, &order[..n])?;
            let topology = match strategy {
                Strategy::ModelStain => Topology::ModelStain,
                Strategy::StainModel => Topology::StainModel,
                _ => Topology::All,
            };
            topology.fuse(&g)
        }
    }
}

/// Score one experiment on every image of the source.
pub fn run_experiment(config: &ExperimentConfig, source: &dyn GridSource) -> Result<ResultTable> {
    let needed = config.kind.models_needed();
    if needed > source.models() {
        return Err(Error::Config(format!(
            "{} needs {needed} models, the source has {}",
            config.kind,
            source.models()
        )));
    }
    if matches!(config.kind, ExperimentKind::SingleModel(0)) || config.kind.ensemble().is_some_and(|(n, _)| n == 0) {
        return Err(Error::Config(format!("{} selects no model", config.kind)));
    }
    let order = model_order(source.models(), config.master_seed);
    let experiment = config.kind.to_string();
    let rows = (0..source.image_ids().len())
        .into_par_iter()
        .map(|i| {
            let pred = fused_mask(source, config, &order, i)?;
            let gt = source.ground_truth(i);
            let score = object_f1(&pred, gt, config.iou_threshold)?;
            Ok(ResultRow {
                experiment: experiment.clone(),
                image_id: source.image_ids()[i].clone(),
                dsc: dsc(&pred, gt)?,
                f1: score.f1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResultTable { rows })
}

/// One experiment per `(n, strategy)`, all reading the same grid source.
pub fn ablation_sweep(
    n_values: &[usize],
    strategies: &[Strategy],
    base: &ExperimentConfig,
    source: &dyn GridSource,
) -> Result<ResultTable> {
    if let Some(&n) = n_values.iter().find(|&&n| n > source.models() || n == 0) {
        return Err(Error::Config(format!("ensemble size {n} is outside 1..={} available models", source.models())));
    }
    let mut table = ResultTable::default();
    for &n in n_values {
        for &strategy in strategies {
            let config = ExperimentConfig { kind: strategy.kind(n), ..base.clone() };
            table.rows.extend(run_experiment(&config, source)?.rows);
        }
    }
    Ok(table)
}
