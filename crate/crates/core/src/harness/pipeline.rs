use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::{ablation_sweep, run_experiment, ExperimentConfig, ExperimentKind, PredictedGrids, Strategy};
use super::report::{report, Report, ResultTable};
use super::{load_dataset, Sample};
use crate::ensemble::{
    grid_mask_name, predict_image_many, sample_subsets, train_stack, train_stacks, ModelStack, PredictConfig,
    ReferenceSegmenter, Segmenter, TrainConfig, DEFAULT_FRACTION,
};
use crate::error::{Error, Result};
use crate::image::{save_mask, BinaryMask, RgbImage};
use crate::metrics::DEFAULT_IOU_THRESHOLD;
use crate::rng::derive_seed;
use crate::stain::{fit_stain_model, normalize_stain, StainFitConfig, StainModel};
use crate::templates::{extract_corpus_features, select_templates, TemplateSet, DEFAULT_TEMPLATE_COUNT};

/// Locations of `images/` + `masks/` dataset directories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

/// Everything a full run needs besides the data itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub master_seed: u64,
    /// Ensemble size.
    pub n: usize,
    /// Stain templates; the original stain is always added.
    pub m: usize,
    pub fraction: f64,
    pub train: TrainConfig,
    pub stain: StainFitConfig,
    pub predict: PredictConfig,
    pub iou_threshold: f64,
    /// Experiments to score; empty means [`PipelineConfig::default_experiments`].
    pub experiments: Vec<ExperimentKind>,
    /// Ensemble sizes of the ablation sweep; empty skips it.
    pub ablation_n: Vec<usize>,
    /// Report baseline; defaults to the full `all` ensemble.
    pub baseline: Option<ExperimentKind>,
    /// Also train one model on the whole training set.
    pub benchmark: bool,
    pub data: Option<DataPaths>,
    pub output: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            n: 33,
            m: DEFAULT_TEMPLATE_COUNT,
            fraction: DEFAULT_FRACTION,
            train: TrainConfig::default(),
            stain: StainFitConfig::default(),
            predict: PredictConfig::default(),
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            experiments: Vec::new(),
            ablation_n: Vec::new(),
            baseline: None,
            benchmark: true,
            data: None,
            output: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
    }

    /// Benchmark, three single models, a five-model vote, and the four
    /// strategies at full size.
    pub fn default_experiments(&self) -> Vec<ExperimentKind> {
        let mut out = Vec::new();
        if self.benchmark {
            out.push(ExperimentKind::Benchmark);
        }
        out.extend((1..=self.n.min(3)).map(ExperimentKind::SingleModel));
        out.push(ExperimentKind::Beds(self.n.min(5)));
        out.extend(Strategy::EVERY.iter().map(|s| s.kind(self.n)));
        out.dedup();
        out
    }

    pub fn experiments(&self) -> Vec<ExperimentKind> {
        if self.experiments.is_empty() {
            self.default_experiments()
        } else {
            self.experiments.clone()
        }
    }

    pub fn baseline(&self) -> ExperimentKind {
        self.baseline.unwrap_or(ExperimentKind::All(self.n))
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("ensemble size n must be at least 1".into()));
        }
        if self.predict.patch_size != self.train.patch_size || self.predict.overlap != self.train.overlap {
            return Err(Error::Config("prediction and training tiling differ".into()));
        }
        if let Some(k) = self.experiments().into_iter().find(|k| k.models_needed() > self.n) {
            return Err(Error::Config(format!("{k} needs more than n = {} models", self.n)));
        }
        if !self.benchmark && self.experiments().contains(&ExperimentKind::Benchmark) {
            return Err(Error::Config("benchmark experiment requested with benchmark training off".into()));
        }
        Ok(())
    }
}

pub struct Datasets {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Datasets {
    pub fn load(paths: &DataPaths) -> Result<Self> {
        Ok(Self {
            train: load_dataset(&paths.train)?,
            val: load_dataset(&paths.val)?,
            test: load_dataset(&paths.test)?,
        })
    }
}

pub struct PipelineOutput {
    pub templates: TemplateSet,
    pub template_models: Vec<StainModel>,
    pub stack: ModelStack,
    pub benchmark: Option<ReferenceSegmenter>,
    pub results: ResultTable,
    pub ablation: ResultTable,
    pub report: Report,
    /// Masks predicted while scoring, benchmark included.
    pub predictions: usize,
}

/// Fit one stain model per template image.
pub fn fit_template_models(
    templates: &TemplateSet,
    corpus: &[Sample],
    config: &StainFitConfig,
    master_seed: u64,
) -> Result<Vec<StainModel>> {
    templates
        .template_ids
        .par_iter()
        .enumerate()
        .map(|(t, id)| {
            let sample = corpus
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::MissingArtifact(format!("template image {id}")))?;
            fit_stain_model(&sample.image, config, derive_seed(master_seed, t as u64, "template-stain"))
        })
        .collect()
}

/// The original image followed by its normalization to every template.
pub fn stain_variants(image: &RgbImage, source: &StainModel, templates: &[StainModel]) -> Result<Vec<RgbImage>> {
    let mut out = Vec::with_capacity(templates.len() + 1);
    out.push(image.clone());
    for t in templates {
        out.push(normalize_stain(image, source, t)?);
    }
    Ok(out)
}

fn pairs(samples: &[Sample]) -> Vec<(RgbImage, BinaryMask)> {
    samples.iter().map(|s| (s.image.clone(), s.mask.clone())).collect()
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    info!("{name}: {:.2}s", start.elapsed().as_secs_f64());
    Ok(out)
}

/// Template selection, stain fitting, stack training, prediction of every
/// (image, stain, model) cell, fusion, scoring and reporting. With `output`
/// set, artifacts, the grid cache and CSVs are written there.
pub fn run_pipeline(config: &PipelineConfig, data: &Datasets, output: Option<&Path>) -> Result<PipelineOutput> {
    config.validate()?;
    let master = config.master_seed;

    let templates = stage("templates", || {
        let corpus: Vec<(String, RgbImage)> = data.train.iter().map(|s| (s.id.clone(), s.image.clone())).collect();
        select_templates(&extract_corpus_features(&corpus), config.m, derive_seed(master, 0, "templates"))
    })?;
    let template_models =
        stage("template stains", || fit_template_models(&templates, &data.train, &config.stain, master))?;

    let train = pairs(&data.train);
    let val = pairs(&data.val);
    let (stack, benchmark) = stage("stack", || {
        let plan = sample_subsets(train.len(), config.n, config.fraction, derive_seed(master, 0, "subsets"))?;
        if !config.benchmark {
            return Ok((train_stack(&train, &val, &plan, &config.train)?, None));
        }
        let full = sample_subsets(train.len(), 1, 1.0, derive_seed(master, 0, "benchmark"))?;
        let mut stacks = train_stacks(&train, &val, &[&plan, &full], &config.train)?;
        let bench = stacks.pop().expect("two stacks").models.remove(0);
        Ok((stacks.pop().expect("two stacks"), Some(bench)))
    })?;

    let variants = stage("stain variants", || {
        data.test
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let source = fit_stain_model(&s.image, &config.stain, derive_seed(master, i as u64, "source-stain"))
                    .map_err(|e| Error::Fit(format!("test image {}: {e}", s.id)))?;
                stain_variants(&s.image, &source, &template_models)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let grids = PredictedGrids::new(
        &data.test,
        variants,
        stack.segmenters(),
        benchmark.as_ref().map(|b| b as &dyn Segmenter),
        config.predict,
    )?;
    let base = ExperimentConfig { kind: config.baseline(), master_seed: master, iou_threshold: config.iou_threshold };
    let results = stage("experiments", || {
        let mut table = ResultTable::default();
        for kind in config.experiments() {
            table.extend(run_experiment(&ExperimentConfig { kind, ..base.clone() }, &grids)?);
        }
        Ok(table)
    })?;
    let ablation = if config.ablation_n.is_empty() {
        ResultTable::default()
    } else {
        stage("ablation", || ablation_sweep(&config.ablation_n, &Strategy::EVERY, &base, &grids))?
    };
    let mut combined = results.clone();
    combined.extend(ablation.clone());
    let summary = report(&combined, &base.kind.to_string())?;
    let predictions = grids.predictions();

    if let Some(out) = output {
        stage("write", || {
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let cfg_path = out.join("config.json");
            let text = serde_json::to_string_pretty(config).expect("config serializes");
            fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
            templates.save(out.join("templates.json"))?;
            let stain_dir = out.join("template_stains");
            fs::create_dir_all(&stain_dir).map_err(|e| Error::io(&stain_dir, e))?;
            for (id, model) in templates.template_ids.iter().zip(&template_models) {
                model.save(stain_dir.join(format!("{id}.json")))?;
            }
            stack.save(out.join("stack"))?;
            if let Some(b) = &benchmark {
                let dir = out.join("benchmark");
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                b.save(dir.join("model.bin"), dir.join("model.json"))?;
            }
            write_grid_cache(&grids, benchmark.is_some(), &out.join("grid"))?;
            results.write_csv(out.join("results.csv"))?;
            if !ablation.rows.is_empty() {
                ablation.write_csv(out.join("ablation.csv"))?;
            }
            summary.write_summary_csv(out.join("summary.csv"))?;
            summary.write_plot_csv(out.join("plot.csv"))
        })?;
    }

    Ok(PipelineOutput { templates, template_models, stack, benchmark, results, ablation, report: summary, predictions })
}

/// `grid/<image_id>/stain{p}_model{q}.png`, plus `benchmark.png`.
pub(crate) fn write_grid_cache(grids: &PredictedGrids<'_>, with_benchmark: bool, root: &Path) -> Result<()> {
    use super::experiment::GridSource;
    for (i, id) in grids.image_ids().iter().enumerate() {
        let dir = root.join(id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let grid = grids.full_grid(i)?;
        for p in 0..grid.stains() {
            for q in 0..grid.models() {
                save_mask(grid.get(p, q), dir.join(grid_mask_name(p, q)))?;
            }
        }
        if with_benchmark {
            save_mask(&grids.benchmark(i)?, dir.join("benchmark.png"))?;
        }
    }
    Ok(())
}

/// Fit each image's source stain model, build its stain variants, predict
/// every (stain, model) cell and write the grid cache under `root`.
#[allow(clippy::too_many_arguments)]
pub fn predict_grid(
    images: &[(String, RgbImage)],
    template_models: &[StainModel],
    models: &[&dyn Segmenter],
    benchmark: Option<&dyn Segmenter>,
    stain: &StainFitConfig,
    predict: &PredictConfig,
    master_seed: u64,
    root: &Path,
) -> Result<()> {
    for (i, (id, image)) in images.iter().enumerate() {
        let source = fit_stain_model(image, stain, derive_seed(master_seed, i as u64, "source-stain"))
            .map_err(|e| Error::Fit(format!("image {id}: {e}")))?;
        let variants = stain_variants(image, &source, template_models)?;
        let dir = root.join(id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (p, variant) in variants.iter().enumerate() {
            for (q, mask) in predict_image_many(models, variant, predict)?.iter().enumerate() {
                save_mask(mask, dir.join(grid_mask_name(p, q)))?;
            }
        }
        if let Some(b) = benchmark {
            save_mask(&predict_image_many(&[b], image, predict)?[0], dir.join("benchmark.png"))?;
        }
    }
    Ok(())
}
