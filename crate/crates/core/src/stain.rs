//! Optical density transforms, sparse non-negative stain factorization and
//! structure-preserving stain normalization.
//!
//! Tissue optical density `V` (3 x pixels) is factored as `V ~ W H` with a
//! two-column stain dictionary `W >= 0` (unit-norm columns) and sparse
//! concentrations `H >= 0`, minimizing
//!
//! ```text
//! ||V - W H||_F^2 + lambda * sum_j ||H(:, j)||_1
//! ```
//!
//! by alternating an exact coordinate-descent lasso for `H` with a
//! per-column projected update of `W` on the unit sphere.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::rng::keyed_rng;

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.15;
pub const DEFAULT_I0: f64 = 255.0;

const MIN_TISSUE_PIXELS: usize = 100;
const DEGENERATE_PERCENTILE: f64 = 1e-6;
const CD_TOLERANCE: f64 = 1e-12;
const CD_MAX_SWEEPS: usize = 10_000;

/// Per-pixel optical density, row-major triples.
#[derive(Clone, Debug, PartialEq)]
pub struct OdImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

/// Per-pixel stain concentrations (first stain, second stain).
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
}

/// A fitted two-stain model.
///
/// `w[s]` is the unit optical-density vector of stain `s`; stain 0 is the one
/// with the larger blue-channel weight (hematoxylin by convention).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainModel {
    pub w: [[f64; 3]; 2],
    pub c_percentile: [f64; 2],
    pub lambda: f64,
    pub beta: f64,
    pub i0: f64,
    pub converged: bool,
}

/// Hyperparameters of [`fit_stain_model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainFitConfig {
    pub lambda: f64,
    pub beta: f64,
    pub i0: f64,
    pub max_outer_iters: usize,
    /// Relative objective change below which the fit is declared converged.
    pub tolerance: f64,
    /// Percentile of each concentration row stored for normalization.
    pub percentile: f64,
    /// Tissue pixels beyond this count are subsampled (seeded) before fitting.
    pub max_pixels: usize,
}

impl Default for StainFitConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            i0: DEFAULT_I0,
            max_outer_iters: 200,
            tolerance: 1e-6,
            percentile: 99.0,
            max_pixels: 20_000,
        }
    }
}

/// Objective value after each outer iteration, starting with the value at
/// the initial dictionary.
#[derive(Clone, Debug, Default)]
pub struct FitTrace {
    pub objectives: Vec<f64>,
    pub tissue_pixels: usize,
    pub fitted_pixels: usize,
}

pub fn rgb_to_od(image: &RgbImage, i0: f64) -> OdImage {
    assert!(i0 > 0.0, "i0 must be positive");
    let lut: Vec<f64> = (0..256).map(|v| pixel_od(v as f64, i0)).collect();
    OdImage {
        width: image.width(),
        height: image.height(),
        data: image.pixels().map(|p| [lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize]]).collect(),
    }
}

#[inline]
fn pixel_od(intensity: f64, i0: f64) -> f64 {
    -((intensity + 1.0) / (i0 + 1.0)).ln()
}

#[inline]
fn od_intensity(od: f64, i0: f64) -> u8 {
    ((i0 + 1.0) * (-od).exp() - 1.0).round().clamp(0.0, 255.0) as u8
}

pub fn od_to_rgb(od: &OdImage, i0: f64) -> RgbImage {
    let data = od.data.iter().flat_map(|v| v.map(|c| od_intensity(c, i0))).collect();
    RgbImage::new(od.width, od.height, data).expect("od image dims are consistent")
}

#[inline]
fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

/// Non-negative lasso for one pixel:
/// `argmin_{h >= 0} ||v - W h||^2 + lambda * (h0 + h1)`, by cyclic coordinate
/// descent from `start`.
pub fn solve_pixel(v: &[f64; 3], w: &[[f64; 3]; 2], lambda: f64, start: [f64; 2]) -> [f64; 2] {
    let g00 = dot3(&w[0], &w[0]);
    let g11 = dot3(&w[1], &w[1]);
    let g01 = dot3(&w[0], &w[1]);
    let b0 = dot3(&w[0], v) - 0.5 * lambda;
    let b1 = dot3(&w[1], v) - 0.5 * lambda;
    let mut h = start;
    for _ in 0..CD_MAX_SWEEPS {
        let h0 = if g00 > 0.0 { ((b0 - g01 * h[1]) / g00).max(0.0) } else { 0.0 };
        let h1 = if g11 > 0.0 { ((b1 - g01 * h0) / g11).max(0.0) } else { 0.0 };
        let delta = (h0 - h[0]).abs().max((h1 - h[1]).abs());
        h = [h0, h1];
        if delta <= CD_TOLERANCE {
            break;
        }
    }
    h
}

/// `||v - W h||^2 + lambda * ||h||_1` for a single pixel.
pub fn pixel_objective(v: &[f64; 3], w: &[[f64; 3]; 2], lambda: f64, h: [f64; 2]) -> f64 {
    let r: [f64; 3] = std::array::from_fn(|c| v[c] - w[0][c] * h[0] - w[1][c] * h[1]);
    dot3(&r, &r) + lambda * (h[0].abs() + h[1].abs())
}

/// Total factorization objective over a set of pixels.
pub fn snmf_objective(v: &[[f64; 3]], w: &[[f64; 3]; 2], h: &[[f64; 2]], lambda: f64) -> f64 {
    v.iter().zip(h).map(|(vj, hj)| pixel_objective(vj, w, lambda, *hj)).sum()
}

/// Best unit-norm, non-negative column `k` with everything else fixed.
///
/// With `H` fixed the penalty is constant, and minimizing
/// `||R_k - w h_k^T||^2` over the non-negative unit sphere reduces to
/// maximizing `w . g` with `g = R_k h_k`, solved by `g+ / |g+|`. If `g` has no
/// positive entry the column is left unchanged.
fn update_column(v: &[[f64; 3]], w: &mut [[f64; 3]; 2], h: &[[f64; 2]], k: usize) {
    let other = 1 - k;
    let mut g = [0.0; 3];
    for (vj, hj) in v.iter().zip(h) {
        if hj[k] == 0.0 {
            continue;
        }
        for c in 0..3 {
            g[c] += hj[k] * (vj[c] - w[other][c] * hj[other]);
        }
    }
    let pos = g.map(|x| x.max(0.0));
    let n = norm3(&pos);
    if n > 0.0 && n.is_finite() {
        w[k] = pos.map(|x| x / n);
    }
}

fn percentile(values: &mut [f64], pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = pct / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

fn tissue_od(image: &RgbImage, config: &StainFitConfig) -> Vec<[f64; 3]> {
    rgb_to_od(image, config.i0)
        .data
        .into_iter()
        .filter(|v| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > config.beta)
        .collect()
}

/// Starting dictionary: the two extreme hues of the tissue, found as the
/// 1st and 99th percentile angles of the OD directions inside their
/// principal plane. A random column replaces the second when both
/// extremes coincide (one-stain images).
fn initial_stains(v: &[[f64; 3]], seed: u64) -> [[f64; 3]; 2] {
    let dirs: Vec<[f64; 3]> = v
        .iter()
        .filter_map(|x| {
            let n = norm3(x);
            (n > 0.0).then(|| x.map(|c| c / n))
        })
        .collect();
    let mut mean = [0.0; 3];
    for d in &dirs {
        for c in 0..3 {
            mean[c] += d[c];
        }
    }
    let mean = mean.map(|c| c / norm3(&mean).max(f64::MIN_POSITIVE));
    let offsets: Vec<[f64; 3]> = dirs
        .iter()
        .map(|d| {
            let along = dot3(d, &mean);
            std::array::from_fn(|c| d[c] - along * mean[c])
        })
        .collect();
    let mut cov = [[0.0; 3]; 3];
    for o in &offsets {
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += o[a] * o[b];
            }
        }
    }
    // principal axis of the offsets by power iteration
    let mut axis = [0.6, -0.3, 0.74];
    for _ in 0..100 {
        let next: [f64; 3] = std::array::from_fn(|a| (0..3).map(|b| cov[a][b] * axis[b]).sum());
        let n = norm3(&next);
        if n == 0.0 {
            break;
        }
        axis = next.map(|c| c / n);
    }
    let mut t: Vec<f64> = offsets.iter().map(|o| dot3(o, &axis)).collect();
    let lo = percentile(&mut t, 1.0);
    let hi = percentile(&mut t, 99.0);
    let column = |s: f64| {
        let raw: [f64; 3] = std::array::from_fn(|c| (mean[c] + s * axis[c]).max(0.0));
        let n = norm3(&raw);
        if n > 0.0 {
            raw.map(|c| c / n)
        } else {
            mean
        }
    };
    let mut w = [column(lo), column(hi)];
    if dot3(&w[0], &w[1]) > 0.999 {
        let mut rng = keyed_rng(seed, 0, "stain-init");
        let col: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..1.0));
        w[1] = col.map(|x| x / norm3(&col));
    }
    w
}

/// Fit a two-stain model to the tissue pixels of `image`.
pub fn fit_stain_model(image: &RgbImage, config: &StainFitConfig, seed: u64) -> Result<StainModel> {
    fit_stain_model_traced(image, config, seed).map(|(m, _)| m)
}

/// [`fit_stain_model`], also returning the objective trace.
pub fn fit_stain_model_traced(image: &RgbImage, config: &StainFitConfig, seed: u64) -> Result<(StainModel, FitTrace)> {
    if config.lambda.is_nan() || config.lambda < 0.0 || config.i0.is_nan() || config.i0 <= 0.0 || config.max_pixels == 0
    {
        return Err(Error::Config(format!("stain fit needs lambda >= 0, i0 > 0, max_pixels > 0: {config:?}")));
    }
    let tissue = tissue_od(image, config);
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(Error::Fit(format!(
            "only {} tissue pixels with optical density above {}; need at least {MIN_TISSUE_PIXELS}",
            tissue.len(),
            config.beta
        )));
    }
    let tissue_pixels = tissue.len();
    let v: Vec<[f64; 3]> = if tissue.len() > config.max_pixels {
        let mut rng = keyed_rng(seed, 0, "stain-subsample");
        let mut idx = sample(&mut rng, tissue.len(), config.max_pixels).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| tissue[i]).collect()
    } else {
        tissue
    };

    let mut w = initial_stains(&v, seed);
    let lambda = config.lambda;
    let mut h: Vec<[f64; 2]> = v.iter().map(|vj| solve_pixel(vj, &w, lambda, [0.0, 0.0])).collect();
    let mut objective = snmf_objective(&v, &w, &h, lambda);
    let mut trace = FitTrace { objectives: vec![objective], tissue_pixels, fitted_pixels: v.len() };
    let mut converged = false;
    for _ in 0..config.max_outer_iters {
        update_column(&v, &mut w, &h, 0);
        update_column(&v, &mut w, &h, 1);
        for (hj, vj) in h.iter_mut().zip(&v) {
            *hj = solve_pixel(vj, &w, lambda, *hj);
        }
        let next = snmf_objective(&v, &w, &h, lambda);
        trace.objectives.push(next);
        let rel = (objective - next).abs() / objective.abs().max(f64::MIN_POSITIVE);
        objective = next;
        if rel < config.tolerance {
            converged = true;
            break;
        }
    }

    if w[1][2] > w[0][2] {
        w.swap(0, 1);
        for hj in &mut h {
            hj.swap(0, 1);
        }
    }
    let c_percentile: [f64; 2] = std::array::from_fn(|s| {
        let mut row: Vec<f64> = h.iter().map(|hj| hj[s]).collect();
        percentile(&mut row, config.percentile)
    });
    log::debug!(
        "stain fit: {} of {} tissue pixels, {} iterations, converged = {converged}",
        trace.fitted_pixels,
        trace.tissue_pixels,
        trace.objectives.len() - 1
    );
    Ok((StainModel { w, c_percentile, lambda, beta: config.beta, i0: config.i0, converged }, trace))
}

impl StainModel {
    /// Check non-negativity, unit columns and finite parameters.
    pub fn validate(&self) -> Result<()> {
        for (s, col) in self.w.iter().enumerate() {
            if col.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(Error::Config(format!("stain column {s} has negative or non-finite entries")));
            }
            if (norm3(col) - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("stain column {s} is not unit norm")));
            }
        }
        if self.c_percentile.iter().any(|&c| c < 0.0 || !c.is_finite())
            || self.lambda.is_nan()
            || self.lambda < 0.0
            || self.i0.is_nan()
            || self.i0 <= 0.0
        {
            return Err(Error::Config("stain model parameters out of range".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("stain model serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-pixel concentrations under `model`, background included.
pub fn solve_concentrations(image: &RgbImage, model: &StainModel) -> ConcentrationMap {
    let od = rgb_to_od(image, model.i0);
    let data = od.data.par_iter().map(|v| solve_pixel(v, &model.w, model.lambda, [0.0, 0.0])).collect();
    ConcentrationMap { width: od.width, height: od.height, data }
}

/// Re-render `source` with the template's stain vectors and concentration
/// scale.
pub fn normalize_stain(source: &RgbImage, source_model: &StainModel, template_model: &StainModel) -> Result<RgbImage> {
    for (s, &c) in source_model.c_percentile.iter().enumerate() {
        if c <= DEGENERATE_PERCENTILE {
            return Err(Error::Normalization(format!(
                "source stain row {s} has degenerate concentration percentile {c:e}"
            )));
        }
    }
    let scale: [f64; 2] = std::array::from_fn(|s| template_model.c_percentile[s] / source_model.c_percentile[s]);
    let conc = solve_concentrations(source, source_model);
    let wt = &template_model.w;
    let od = OdImage {
        width: conc.width,
        height: conc.height,
        data: conc
            .data
            .iter()
            .map(|h| {
                let a = h[0] * scale[0];
                let b = h[1] * scale[1];
                std::array::from_fn(|c| wt[0][c] * a + wt[1][c] * b)
            })
            .collect(),
    };
    Ok(od_to_rgb(&od, template_model.i0))
}
