//! Per-pixel features for the reference segmenter.
//!
//! Six base channels (RGB scaled to `[0,1]` and optical density), each
//! Gaussian-smoothed at three scales, plus the 5x5 local mean and standard
//! deviation of every base channel: 6 + 18 + 12 = 36 features per pixel.

use crate::image::RgbImage;
use crate::stain::DEFAULT_I0;

pub const BASE_CHANNELS: usize = 6;
pub const SIGMAS: [f32; 3] = [1.0, 2.0, 4.0];
pub const LOCAL_WINDOW: usize = 5;
pub const FEATURE_COUNT: usize = BASE_CHANNELS * (1 + SIGMAS.len() + 2);

/// Feature matrix of one patch, pixel-major (`pixel * FEATURE_COUNT + f`).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl PatchFeatures {
    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.values[i * FEATURE_COUNT..(i + 1) * FEATURE_COUNT]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-radius..=radius).map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable convolution with clamp-to-edge borders.
fn convolve(plane: &[f32], w: usize, h: usize, kernel: &[f32]) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0f32;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * row[xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for (k, &kv) in kernel.iter().enumerate() {
            let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
            let src = &tmp[yy * w..(yy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    out
}

pub fn compute_features(patch: &RgbImage) -> PatchFeatures {
    let (w, h) = patch.dims();
    let n = w * h;
    let od_lut: Vec<f32> = (0..256).map(|v| (-((v as f64 + 1.0) / (DEFAULT_I0 + 1.0)).ln()) as f32).collect();
    let mut planes = vec![vec![0.0f32; n]; BASE_CHANNELS];
    for (i, px) in patch.pixels().enumerate() {
        for c in 0..3 {
            planes[c][i] = px[c] as f32 / 255.0;
            planes[3 + c][i] = od_lut[px[c] as usize];
        }
    }

    let mut derived: Vec<Vec<f32>> = Vec::with_capacity(FEATURE_COUNT);
    derived.extend(planes.iter().cloned());
    for sigma in SIGMAS {
        let kernel = gaussian_kernel(sigma);
        for plane in &planes {
            derived.push(convolve(plane, w, h, &kernel));
        }
    }
    let box_kernel = vec![1.0 / LOCAL_WINDOW as f32; LOCAL_WINDOW];
    for plane in &planes {
        let mean = convolve(plane, w, h, &box_kernel);
        let sq: Vec<f32> = plane.iter().map(|v| v * v).collect();
        let mean_sq = convolve(&sq, w, h, &box_kernel);
        let std = mean.iter().zip(&mean_sq).map(|(m, s)| (s - m * m).max(0.0).sqrt()).collect();
        derived.push(mean);
        derived.push(std);
    }
    debug_assert_eq!(derived.len(), FEATURE_COUNT);

    let mut values = vec![0.0f32; n * FEATURE_COUNT];
    for (f, plane) in derived.iter().enumerate() {
        for (i, &v) in plane.iter().enumerate() {
            values[i * FEATURE_COUNT + f] = v;
        }
    }
    PatchFeatures { width: w, height: h, values }
}
