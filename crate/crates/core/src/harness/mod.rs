//! Synthetic corpora, the experiment matrix, ablation sweeps and reports.

mod experiment;
mod pipeline;
mod report;
mod synthetic;

use std::fs;
use std::path::Path;

pub use self::experiment::{
    ablation_sweep, model_order, run_experiment, ExperimentConfig, ExperimentKind, ExternalGrids, GridSource,
    PredictedGrids, Strategy,
};
pub use self::pipeline::{
    fit_template_models, predict_grid, run_pipeline, stain_variants, DataPaths, Datasets, PipelineConfig,
    PipelineOutput,
};
pub use self::report::{report, Aggregate, PlotPoint, Report, ReportRow, ResultRow, ResultTable};
pub use self::synthetic::{gen_synthetic, render_synthetic, SyntheticSpec, EOSIN_OD, HEMATOXYLIN_OD};

use crate::error::{Error, Result};
use crate::image::{load_image, load_mask, save_image, save_mask, BinaryMask, RgbImage};

/// One annotated image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub mask: BinaryMask,
}

/// Write `images/<id>.png` and `masks/<id>.png` under `dir`.
pub fn save_dataset(samples: &[Sample], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in samples {
        save_image(&s.image, dir.join("images").join(format!("{}.png", s.id)))?;
        save_mask(&s.mask, dir.join("masks").join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

/// Load every `images/*.png` under `dir` with its same-named mask, sorted by
/// id.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let ids = list_png_ids(&dir.join("images"))?;
    ids.into_iter()
        .map(|id| {
            let image = load_image(dir.join("images").join(format!("{id}.png")))?;
            let mask_path = dir.join("masks").join(format!("{id}.png"));
            if !mask_path.exists() {
                return Err(Error::MissingArtifact(format!("mask {}", mask_path.display())));
            }
            let mask = load_mask(&mask_path)?;
            if mask.dims() != image.dims() {
                return Err(Error::Dimensions(format!("{id}: image {:?}, mask {:?}", image.dims(), mask.dims())));
            }
            Ok(Sample { id, image, mask })
        })
        .collect()
}

/// Load `images/*.png` only, sorted by id.
pub fn load_images(dir: impl AsRef<Path>) -> Result<Vec<(String, RgbImage)>> {
    let dir = dir.as_ref();
    let images = if dir.join("images").is_dir() { dir.join("images") } else { dir.to_path_buf() };
    list_png_ids(&images)?
        .into_iter()
        .map(|id| {
            let img = load_image(images.join(format!("{id}.png")))?;
            Ok((id, img))
        })
        .collect()
}

pub(crate) fn list_png_ids(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(format!("directory {}", dir.display())));
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}
